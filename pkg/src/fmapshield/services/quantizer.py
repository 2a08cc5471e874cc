"""Symmetric INT8 fake quantization of conv outputs, driven by calibrated ranges."""

import logging
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from fmapshield.config import settings
from fmapshield.core.errors import InvalidRequestError
from fmapshield.schemas.dataset import Dataset
from fmapshield.schemas.network import FmapId
from fmapshield.schemas.quant import AccuracyReport, FmapRange, RangeProfile
from fmapshield.services.engine import ActivationTrace, Network, TapPoint, classify, forward

logger = logging.getLogger(__name__)

QMIN, QMAX = -128, 127
MIN_SCALE = float(np.finfo(np.float32).tiny)


def symmetric_scale(min_observed: float, max_observed: float) -> float:
    """max(|min|, |max|) / 127 as a float32 value; degenerate ranges get MIN_SCALE."""
    abs_max = max(abs(min_observed), abs(max_observed))
    if abs_max == 0.0:
        return MIN_SCALE
    return max(float(np.float32(abs_max / QMAX)), MIN_SCALE)


def quantize_array(x, scale) -> np.ndarray:
    """clamp(round(x / scale)) with ties rounded away from zero, as int16 codes."""
    q = np.asarray(x, dtype=np.float64) / np.asarray(scale, dtype=np.float64)
    magnitude = np.abs(q)
    whole = np.floor(magnitude)
    rounded = np.copysign(whole + (magnitude - whole >= 0.5), q)
    return np.clip(rounded, QMIN, QMAX).astype(np.int16)


def dequantize_array(codes, scale, dtype=np.float32) -> np.ndarray:
    return np.asarray(codes).astype(dtype) * np.asarray(scale).astype(dtype)


def quantize(x: float, scale: float) -> int:
    return int(quantize_array(x, scale))


def dequantize(code: int, scale: float) -> float:
    return float(dequantize_array(code, scale))


@dataclass(frozen=True)
class QuantScheme:
    scales: dict[int, np.ndarray]  # conv layer index -> per-channel float32 scale
    bits: int = 8

    @classmethod
    def from_profile(cls, net: Network, profile: RangeProfile) -> "QuantScheme":
        ranges = profile.by_fmap()
        if len(ranges) != len(profile.fmaps):
            raise InvalidRequestError("profile lists an fmap more than once")
        missing = [f for f in net.fmap_index if f not in ranges]
        unknown = sorted(set(ranges) - set(net.fmap_index))
        if missing or unknown:
            raise InvalidRequestError(
                f"profile does not match network: missing {missing[:5]}, unknown {unknown[:5]}"
            )
        scales = {}
        for layer in net.conv_layers:
            channels = net.output_shapes[layer][0]
            scales[layer] = np.array(
                [ranges[FmapId(layer, c)].scale for c in range(channels)], dtype=np.float32
            )
            scales[layer].setflags(write=False)
        return cls(scales)

    def scale(self, fmap: FmapId) -> float:
        return float(self.scales[fmap.layer][fmap.channel])

    def fake_quant(
        self, layer_index: int, x: np.ndarray, channels: Iterable[int] | None = None
    ) -> np.ndarray:
        """quantize then dequantize (N, C, H, W) conv output; `channels` names x's channels."""
        scale = self.scales[layer_index]
        if channels is not None:
            scale = scale[list(channels)]
        scale = scale[None, :, None, None]
        return dequantize_array(quantize_array(x, scale), scale, dtype=x.dtype)


def _fmap_ranges(mins: dict[int, np.ndarray], maxs: dict[int, np.ndarray]) -> list[FmapRange]:
    return [
        FmapRange(
            layer=layer,
            channel=channel,
            min_observed=float(low),
            max_observed=float(high),
            scale=symmetric_scale(float(low), float(high)),
        )
        for layer in sorted(mins)
        for channel, (low, high) in enumerate(zip(mins[layer], maxs[layer], strict=True))
    ]


def calibrate(net: Network, images: np.ndarray, chunk_size: int | None = None) -> RangeProfile:
    """Per-fmap min/max of float conv outputs over every neuron of every image."""
    count = images.shape[0]
    if count == 0:
        raise InvalidRequestError("calibration set is empty")
    chunk_size = chunk_size or settings.chunk_size
    mins: dict[int, np.ndarray] = {}
    maxs: dict[int, np.ndarray] = {}
    for start in range(0, count, chunk_size):
        batch = images[start : start + chunk_size]
        trace = forward(net, batch, np.zeros(batch.shape[0], dtype=np.int64))
        for layer in net.conv_layers:
            out = trace.layer_outputs[layer]
            low, high = out.min(axis=(0, 2, 3)), out.max(axis=(0, 2, 3))
            mins[layer] = np.minimum(mins[layer], low) if layer in mins else low
            maxs[layer] = np.maximum(maxs[layer], high) if layer in maxs else high
    profile = RangeProfile(calibration_sample_count=count, fmaps=_fmap_ranges(mins, maxs))
    logger.info(
        "Calibration finished", extra={"images": count, "fmaps": len(profile.fmaps)}
    )
    return profile


def merge_profiles(first: RangeProfile, second: RangeProfile) -> RangeProfile:
    """Profile of the union of two calibration sets."""
    a, b = first.by_fmap(), second.by_fmap()
    if set(a) != set(b):
        raise InvalidRequestError("profiles cover different fmaps")
    fmaps = []
    for fmap in sorted(a):
        low = min(a[fmap].min_observed, b[fmap].min_observed)
        high = max(a[fmap].max_observed, b[fmap].max_observed)
        fmaps.append(
            FmapRange(
                layer=fmap.layer,
                channel=fmap.channel,
                min_observed=low,
                max_observed=high,
                scale=symmetric_scale(low, high),
            )
        )
    return RangeProfile(
        calibration_sample_count=first.calibration_sample_count + second.calibration_sample_count,
        fmaps=fmaps,
    )


def fake_quant_forward(
    net: Network,
    inputs: np.ndarray,
    labels,
    profile: RangeProfile | QuantScheme,
    tap: TapPoint | None = None,
) -> ActivationTrace:
    scheme = profile if isinstance(profile, QuantScheme) else QuantScheme.from_profile(net, profile)
    return forward(net, inputs, labels, tap=tap, quant=scheme)


def evaluate_accuracy(
    net: Network, dataset: Dataset, scheme: QuantScheme | None = None
) -> AccuracyReport:
    if len(dataset) == 0:
        raise InvalidRequestError("evaluation set is empty")
    chunk = settings.chunk_size
    float_top1 = classify(net, dataset.images, dataset.labels, chunk_size=chunk)
    quantized = None
    if scheme is not None:
        quant_top1 = classify(net, dataset.images, dataset.labels, quant=scheme, chunk_size=chunk)
        quantized = float(np.mean(quant_top1 == dataset.labels))
    return AccuracyReport(
        sample_count=len(dataset),
        float_accuracy=float(np.mean(float_top1 == dataset.labels)),
        quantized_accuracy=quantized,
    )
