from enum import StrEnum
from pathlib import Path

from pydantic import BaseModel, Field, model_validator

from fmapshield.schemas.network import FmapId


class ErrorModel(StrEnum):
    FP_RAND = "fp-rand"
    FXP_RAND = "fxp-rand"
    FXP_FLIP = "fxp-flip"

    @property
    def quantized(self) -> bool:
        return self != ErrorModel.FP_RAND


class DatasetSplit(StrEnum):
    ES = "es"
    TS = "ts"


class Outcome(StrEnum):
    MASKED = "masked"
    MISMATCH = "mismatch"


class InjectionSite(BaseModel):
    image_id: int = Field(ge=0)
    layer: int = Field(ge=0)
    channel: int = Field(ge=0)
    h: int = Field(ge=0)
    w: int = Field(ge=0)
    bit: int | None = Field(default=None, ge=0, le=7, description="FxP-Flip only")
    code: int | None = Field(
        default=None, ge=-128, le=127, description="Replacement code, exhaustive FxP-Rand only"
    )

    model_config = {"frozen": True}

    @property
    def fmap(self) -> FmapId:
        return FmapId(self.layer, self.channel)


class InjectionRecord(BaseModel):
    ordinal: int = Field(ge=0, description="Position of the injection within its fmap")
    image_id: int
    layer: int
    channel: int
    h: int
    w: int
    bit: int | None = None
    error_model: ErrorModel
    original_value: float
    corrupted_value: float
    golden_loss: float
    injected_loss: float
    golden_top1: int
    injected_top1: int
    outcome: Outcome

    @property
    def fmap(self) -> FmapId:
        return FmapId(self.layer, self.channel)

    @property
    def loss_delta(self) -> float:
        return abs(self.golden_loss - self.injected_loss)

    @model_validator(mode="after")
    def check_outcome(self) -> "InjectionRecord":
        expected = Outcome.MISMATCH if self.injected_top1 != self.golden_top1 else Outcome.MASKED
        if self.outcome != expected:
            raise ValueError(f"outcome {self.outcome} disagrees with top-1 comparison")
        return self


class CampaignConfig(BaseModel):
    error_model: ErrorModel
    injections_per_fmap: int = Field(ge=1)
    split: DatasetSplit = DatasetSplit.TS
    master_seed: int = Field(default=0, ge=0, lt=2**64)
    fmaps: list[FmapId] | None = Field(default=None, description="Subset of fmaps; all when None")
    exhaustive: bool = Field(
        default=False, description="Evaluate every enumerable site instead of sampling"
    )


class CampaignFile(BaseModel):
    """On-disk campaign description (JSON)."""

    model: Path
    dataset: str
    labels: Path | None = None
    profile: Path | None = None
    campaign: CampaignConfig
