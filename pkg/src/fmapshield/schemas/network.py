from enum import StrEnum
from typing import NamedTuple

from pydantic import BaseModel, Field, model_validator

MODEL_SCHEMA_VERSION = 1


class FmapId(NamedTuple):
    """A conv output channel: (ordinal of the conv layer in the layer list, channel)."""

    layer: int
    channel: int

    def __str__(self) -> str:
        return f"L{self.layer}C{self.channel}"


class LayerKind(StrEnum):
    CONV2D = "conv2d"
    RELU = "relu"
    MAXPOOL2D = "maxpool2d"
    AVGPOOL2D = "avgpool2d"
    FLATTEN = "flatten"
    DENSE = "dense"


class LayerConfig(BaseModel):
    kind: LayerKind
    in_channels: int | None = Field(default=None, ge=1)
    out_channels: int | None = Field(default=None, ge=1)
    kernel_size: tuple[int, int] | None = None
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)
    in_features: int | None = Field(default=None, ge=1)
    out_features: int | None = Field(default=None, ge=1)

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def check_kind_parameters(self) -> "LayerConfig":
        if self.kind == LayerKind.CONV2D:
            if None in (self.in_channels, self.out_channels, self.kernel_size):
                raise ValueError("conv2d needs in_channels, out_channels and kernel_size")
        elif self.kind in (LayerKind.MAXPOOL2D, LayerKind.AVGPOOL2D):
            if self.kernel_size is None:
                raise ValueError(f"{self.kind} needs kernel_size")
            if self.padding:
                raise ValueError("pooling layers take no padding")
        elif self.kind == LayerKind.DENSE:
            if None in (self.in_features, self.out_features):
                raise ValueError("dense needs in_features and out_features")
        return self

    @property
    def has_weights(self) -> bool:
        return self.kind in (LayerKind.CONV2D, LayerKind.DENSE)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == LayerKind.CONV2D:
            return (self.out_channels, self.in_channels, *self.kernel_size)
        if self.kind == LayerKind.DENSE:
            return (self.out_features, self.in_features)
        return ()

    @property
    def bias_shape(self) -> tuple[int, ...]:
        if self.kind == LayerKind.CONV2D:
            return (self.out_channels,)
        if self.kind == LayerKind.DENSE:
            return (self.out_features,)
        return ()


class DuplicationEntry(BaseModel):
    layer: int = Field(ge=0)
    channel: int = Field(ge=0)
    shadow_channel: int = Field(ge=0, description="Index of the shadow filter in the widened bank")


class ModelManifest(BaseModel):
    """Text half of a persisted model; weights live in the companion blob.

    The blob holds little-endian float32 values: for each layer with weights, in layer
    order, the weight tensor then the bias vector (row-major). Shadow filters of a
    hardened model follow, in `duplication` order, each as weights then bias.
    """

    schema_version: int = MODEL_SCHEMA_VERSION
    name: str = "model"
    input_shape: tuple[int, int, int] = Field(description="(C, H, W) of one input image")
    class_count: int = Field(ge=2)
    layers: list[LayerConfig] = Field(min_length=1)
    weights_file: str
    weights_sha256: str
    duplication: list[DuplicationEntry] = Field(default_factory=list)
    detection_tolerance: float = Field(default=0.0, ge=0.0)
