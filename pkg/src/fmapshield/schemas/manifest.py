import hashlib
import json
from datetime import datetime, timezone

from pydantic import BaseModel, Field

from fmapshield import __version__


def config_hash(config: dict) -> str:
    """Stable short hash of a stage configuration."""
    data = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(data.encode()).hexdigest()[:16]


class RunManifest(BaseModel):
    tool_version: str = __version__
    command: str
    config: dict
    config_hash: str
    master_seed: int
    input_digests: dict[str, str] = Field(default_factory=dict)
    stage_seconds: dict[str, float] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


class ArtifactSummary(BaseModel):
    kind: str
    schema_version: int
    manifest: str
    rows: int


class RunReport(BaseModel):
    """Everything one output directory holds, keyed by file name."""

    artifacts: dict[str, ArtifactSummary]
    manifests: dict[str, str] = Field(description="Manifest file name to its config hash")
    orphans: list[str] = Field(
        default_factory=list, description="Artifacts whose manifest hash matches no manifest"
    )
