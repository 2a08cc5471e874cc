from pydantic import BaseModel, Field, model_validator

from fmapshield.schemas.network import FmapId

PROFILE_SCHEMA_VERSION = 1


class FmapRange(BaseModel):
    layer: int = Field(ge=0)
    channel: int = Field(ge=0)
    min_observed: float
    max_observed: float
    scale: float = Field(gt=0.0, description="Symmetric INT8 step: max(|min|, |max|) / 127")

    @model_validator(mode="after")
    def check_order(self) -> "FmapRange":
        if self.min_observed > self.max_observed:
            raise ValueError("min_observed exceeds max_observed")
        return self

    @property
    def fmap(self) -> FmapId:
        return FmapId(self.layer, self.channel)

    @property
    def abs_max(self) -> float:
        return max(abs(self.min_observed), abs(self.max_observed))


class RangeProfile(BaseModel):
    schema_version: int = PROFILE_SCHEMA_VERSION
    calibration_sample_count: int = Field(ge=1)
    fmaps: list[FmapRange]

    def by_fmap(self) -> dict[FmapId, FmapRange]:
        return {r.fmap: r for r in self.fmaps}


class AccuracyReport(BaseModel):
    sample_count: int
    float_accuracy: float = Field(ge=0.0, le=1.0)
    quantized_accuracy: float | None = Field(
        default=None, ge=0.0, le=1.0, description="Fake-quantized top-1; None without a profile"
    )
