from enum import StrEnum

from pydantic import BaseModel, Field

from fmapshield.schemas.network import FmapId


class Copy(StrEnum):
    PRIMARY = "primary"
    SHADOW = "shadow"


class DetectionReport(BaseModel):
    detected: bool
    first_divergent_fmap: FmapId | None = None
    max_abs_divergence: float = 0.0


class EfficacyRecord(BaseModel):
    ordinal: int
    layer: int
    channel: int
    protected: bool
    copy_hit: Copy
    value_changed: bool
    detected: bool
    golden_top1: int
    injected_top1: int
    baseline_mismatch: bool = Field(description="Outcome of the same injection without hardening")

    @property
    def fmap(self) -> FmapId:
        return FmapId(self.layer, self.channel)

    @property
    def silent_mismatch(self) -> bool:
        return not self.detected and self.injected_top1 != self.golden_top1


class EfficacyReport(BaseModel):
    injections: int
    protected_injections: int
    detected_fraction: float | None = Field(
        description="Share of protected-fmap injections detected; None without any"
    )
    baseline_mismatch_rate: float
    residual_mismatch_rate: float = Field(
        description="Undetected mismatches over all injections"
    )
    residual_mismatch_among_undetected: float | None
    improvement_factor: float | None = Field(
        description="baseline / residual; None when residual is zero or both are zero"
    )
    unchanged_value_injections: int = Field(
        default=0, description="Corrupted value equal to the original; harmless and undetectable"
    )
