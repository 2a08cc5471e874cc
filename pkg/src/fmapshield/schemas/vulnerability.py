from dataclasses import dataclass
from enum import StrEnum

from pydantic import BaseModel, Field

from fmapshield.schemas.network import FmapId


class Metric(StrEnum):
    MISMATCH = "mismatch"
    DELTA_LOSS = "delta_loss"


class HeuristicKind(StrEnum):
    MAX_NEURON = "max_neuron"
    FMAP_RANGE = "fmap_range"
    AVERAGE_L2 = "average_l2"
    GRADIENT = "gradient"
    GAIN = "gain"
    MOD_GAIN = "mod_gain"

    @property
    def needs_backward(self) -> bool:
        return self in (HeuristicKind.GRADIENT, HeuristicKind.GAIN, HeuristicKind.MOD_GAIN)


class FmapVulnerability(BaseModel):
    layer: int
    channel: int
    macs: int = Field(ge=0)
    orig_p: float = Field(ge=0.0, le=1.0)
    prop_p: dict[str, float] = Field(description="Propagation estimate per metric name")
    v_fmap: float = Field(ge=0.0)
    rel_v: float | None = Field(default=None, description="None while V_CNN is zero")

    @property
    def fmap(self) -> FmapId:
        return FmapId(self.layer, self.channel)


class VulnerabilityTable(BaseModel):
    metric: str = Field(description="prop_p entry that produced v_fmap")
    fmaps: list[FmapVulnerability]
    v_cnn: float = Field(ge=0.0)
    dense_mac_fraction: float = Field(ge=0.0, le=1.0)
    rel_v_defined: bool

    def rel_v(self) -> dict[FmapId, float]:
        if not self.rel_v_defined:
            return {}
        return {row.fmap: row.rel_v for row in self.fmaps}


class LayerVulnerability(BaseModel):
    layer: int
    fmap_count: int
    v_layer: float
    rel_v: float | None


@dataclass(frozen=True)
class HeuristicProfile:
    sample_count: int
    scores: dict[HeuristicKind, dict[FmapId, float]]
    skipped_gain_terms: int = 0  # logit gaps below 1e-12 left out of Gain/Mod-Gain
