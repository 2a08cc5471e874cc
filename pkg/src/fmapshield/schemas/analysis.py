from enum import StrEnum

from pydantic import BaseModel, Field, model_validator

from fmapshield.schemas.network import FmapId

SPLIT_RATIO = 0.8


class SplitSpec(BaseModel):
    es_image_ids: list[int]
    ts_image_ids: list[int]
    seed: int
    split_ratio: float = SPLIT_RATIO

    @model_validator(mode="after")
    def check_disjoint(self) -> "SplitSpec":
        if set(self.es_image_ids) & set(self.ts_image_ids):
            raise ValueError("ES and TS overlap")
        return self


class VulnCurve(BaseModel):
    fmap_order: list[FmapId]
    cumulative: list[float]

    @model_validator(mode="after")
    def check_lengths(self) -> "VulnCurve":
        if len(self.fmap_order) != len(self.cumulative):
            raise ValueError("curve order and values differ in length")
        return self


class CoveragePlan(BaseModel):
    target_coverage: float = Field(gt=0.0, le=1.0)
    metric: str
    selected_fmaps: list[FmapId]
    predicted_coverage: float
    mac_overhead_fraction: float


class CoveragePoint(BaseModel):
    fmap_count: int
    fmap: FmapId | None
    predicted_coverage: float
    mac_overhead_fraction: float


class CoverageValidation(BaseModel):
    predicted_coverage: float
    actual_coverage: float | None = Field(description="None when the TS campaign saw no mismatch")
    ts_mismatches: int
    covered_mismatches: int


class ConvergencePoint(BaseModel):
    metric: str
    injections_per_fmap: int
    distance: float


class Technique(StrEnum):
    MISMATCH = "mismatch"
    DELTA_LOSS = "delta_loss"
    MAX_NEURON = "max_neuron"
    FMAP_RANGE = "fmap_range"
    AVERAGE_L2 = "average_l2"
    GRADIENT = "gradient"
    GAIN = "gain"
    MOD_GAIN = "mod_gain"


class CurveDistance(BaseModel):
    name: str
    reference: str
    distance: float = Field(ge=0.0)


class PassTimes(BaseModel):
    """Per-sample wall-clock cost of one forward and one backward pass, in seconds."""

    forward_seconds: float = Field(gt=0.0)
    backward_seconds: float = Field(gt=0.0)
    batch_size: int


class RuntimeEstimate(BaseModel):
    technique: Technique
    sample_count: int
    predicted_seconds: float
    measured_seconds: float | None = None
