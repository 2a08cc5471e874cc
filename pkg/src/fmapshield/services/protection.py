"""Selective filter duplication with duplicate-compare error detection."""

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from fmapshield.config import settings
from fmapshield.core.errors import InvalidRequestError
from fmapshield.core.seeding import derive_seed, injection_rng
from fmapshield.schemas.analysis import CoveragePlan
from fmapshield.schemas.campaign import InjectionRecord, Outcome
from fmapshield.schemas.dataset import Dataset
from fmapshield.schemas.network import FmapId
from fmapshield.schemas.protection import Copy, DetectionReport, EfficacyRecord, EfficacyReport
from fmapshield.schemas.quant import RangeProfile
from fmapshield.services.engine import (
    ActivationTrace,
    Layer,
    Network,
    conv2d_filters,
    forward,
)
from fmapshield.services.metrics import group_by_fmap
from fmapshield.services.quantizer import QuantScheme

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HardenedNetwork:
    """Base network plus one shadow filter per protected fmap.

    Shadow filters sit after the original filters of their conv bank; `duplication`
    maps each protected fmap to its shadow's index in that widened bank. Shadows are
    compared with their primaries and dropped; only primaries feed later layers.
    """

    base: Network
    duplication: dict[FmapId, int]
    tolerance: float = 0.0
    widened: dict[int, Layer] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        widened = {}
        for layer_index in sorted({fmap.layer for fmap in self.duplication}):
            layer = self.base.layers[layer_index]
            pairs = self.shadow_channels(layer_index)
            out_channels = layer.config.out_channels
            expected = list(range(out_channels, out_channels + len(pairs)))
            if sorted(shadow for _, shadow in pairs) != expected:
                raise InvalidRequestError(
                    f"layer {layer_index}: shadow indices must be {expected}"
                )
            by_shadow = sorted(pairs, key=lambda pair: pair[1])
            primaries = [channel for channel, _ in by_shadow]
            config = layer.config.model_copy(
                update={"out_channels": out_channels + len(primaries)}
            )
            widened[layer_index] = Layer(
                config,
                np.concatenate([layer.weight, layer.weight[primaries]]),
                np.concatenate([layer.bias, layer.bias[primaries]]),
            )
        object.__setattr__(self, "widened", widened)

    @property
    def protected(self) -> list[FmapId]:
        return sorted(self.duplication)

    def shadow_channels(self, layer_index: int) -> list[tuple[int, int]]:
        """(primary channel, shadow index) pairs of one conv layer, by primary channel."""
        return sorted(
            (fmap.channel, shadow)
            for fmap, shadow in self.duplication.items()
            if fmap.layer == layer_index
        )

    def channel_counts(self) -> dict[int, int]:
        """Filters per conv layer including shadows."""
        return {
            layer: self.base.layers[layer].config.out_channels + len(self.shadow_channels(layer))
            for layer in self.base.conv_layers
        }


def harden(
    net: Network, plan: CoveragePlan | Iterable[FmapId], tolerance: float = 0.0
) -> HardenedNetwork:
    fmaps = [FmapId(*f) for f in (plan.selected_fmaps if isinstance(plan, CoveragePlan) else plan)]
    unique = sorted(set(fmaps))
    if len(unique) != len(fmaps):
        logger.info(f"Ignoring {len(fmaps) - len(unique)} duplicate fmaps in the plan")
    for fmap in unique:
        net.check_fmap(fmap)
    duplication = {}
    for layer_index in net.conv_layers:
        base_channels = net.layers[layer_index].config.out_channels
        chosen = [fmap for fmap in unique if fmap.layer == layer_index]
        for offset, fmap in enumerate(chosen):
            duplication[fmap] = base_channels + offset
    hardened = HardenedNetwork(net, duplication, tolerance)
    logger.info("Network hardened", extra={"protected_fmaps": len(duplication)})
    return hardened


@dataclass(frozen=True)
class Fault:
    """One corrupted neuron in either copy of an fmap."""

    fmap: FmapId
    h: int
    w: int
    value: float
    copy: Copy = Copy.PRIMARY


def _check_fault(hnet: HardenedNetwork, fault: Fault) -> None:
    height, width = hnet.base.fmap_shape(fault.fmap)
    if not (0 <= fault.h < height and 0 <= fault.w < width):
        raise InvalidRequestError(f"fault ({fault.h}, {fault.w}) outside {fault.fmap}")
    if fault.copy == Copy.SHADOW and fault.fmap not in hnet.duplication:
        raise InvalidRequestError(f"{fault.fmap} is not protected and has no shadow copy")


def detect_forward_batch(
    hnet: HardenedNetwork,
    inputs: np.ndarray,
    labels,
    faults: Sequence[Fault | None] | None = None,
    quant: QuantScheme | None = None,
) -> tuple[ActivationTrace, list[DetectionReport]]:
    """Inference with shadow comparison; at most one fault per sample.

    Comparison results are collected as layers run and reported at the end; they
    never change what downstream layers consume.
    """
    count = np.asarray(inputs).shape[0] if np.ndim(inputs) == 4 else 1
    faults = list(faults) if faults is not None else [None] * count
    if len(faults) != count:
        raise InvalidRequestError(f"{len(faults)} faults for {count} samples")
    for fault in faults:
        if fault is not None:
            _check_fault(hnet, fault)
    divergence = np.zeros(count)
    first: list[FmapId | None] = [None] * count

    def compare(layer_index: int, layer_input: np.ndarray, output: np.ndarray) -> np.ndarray:
        hits = [(row, f) for row, f in enumerate(faults) if f and f.fmap.layer == layer_index]
        if any(f.copy == Copy.PRIMARY for _, f in hits):
            output = output.copy()
            for row, f in hits:
                if f.copy == Copy.PRIMARY:
                    output[row, f.fmap.channel, f.h, f.w] = f.value
        pairs = hnet.shadow_channels(layer_index)
        if not pairs:
            return output
        channels = [channel for channel, _ in pairs]
        shadows = conv2d_filters(
            layer_input, hnet.widened[layer_index], [shadow for _, shadow in pairs]
        )
        if quant is not None:
            shadows = quant.fake_quant(layer_index, shadows, channels=channels)
        for row, f in hits:
            if f.copy == Copy.SHADOW:
                shadows[row, channels.index(f.fmap.channel), f.h, f.w] = f.value
        gap = np.abs(output[:, channels].astype(np.float64) - shadows.astype(np.float64))
        gap = gap.max(axis=(2, 3))
        for row in range(count):
            if first[row] is None:
                diverged = np.flatnonzero(gap[row] > hnet.tolerance)
                if diverged.size:
                    first[row] = FmapId(layer_index, channels[diverged[0]])
        np.maximum(divergence, gap.max(axis=1), out=divergence)
        return output

    trace = forward(hnet.base, inputs, labels, quant=quant, observer=compare)
    reports = [
        DetectionReport(
            detected=first[row] is not None,
            first_divergent_fmap=first[row],
            max_abs_divergence=float(divergence[row]),
        )
        for row in range(count)
    ]
    return trace, reports


def detect_forward(
    hnet: HardenedNetwork,
    inputs: np.ndarray,
    label: int,
    fault: Fault | None = None,
    quant: QuantScheme | None = None,
) -> tuple[ActivationTrace, DetectionReport]:
    trace, reports = detect_forward_batch(hnet, inputs, label, [fault], quant)
    return trace, reports[0]


def _copy_hit(seed: int, record: InjectionRecord, protected: bool) -> Copy:
    if not protected:
        return Copy.PRIMARY
    rng = injection_rng(seed, record.layer, record.channel, record.ordinal)
    return Copy.SHADOW if rng.integers(2) else Copy.PRIMARY


def _summarize(rows: list[EfficacyRecord]) -> EfficacyReport:
    total = len(rows)
    protected = [r for r in rows if r.protected]
    undetected = [r for r in rows if not r.detected]
    silent = sum(r.silent_mismatch for r in rows)
    baseline = sum(r.baseline_mismatch for r in rows) / total
    residual = silent / total
    if protected:
        detected_fraction = sum(r.detected for r in protected) / len(protected)
    else:
        detected_fraction = None
        logger.warning("No injection hit a protected fmap; detected fraction undefined")
    return EfficacyReport(
        injections=total,
        protected_injections=len(protected),
        detected_fraction=detected_fraction,
        baseline_mismatch_rate=baseline,
        residual_mismatch_rate=residual,
        residual_mismatch_among_undetected=silent / len(undetected) if undetected else None,
        improvement_factor=baseline / residual if residual > 0 else None,
        unchanged_value_injections=sum(not r.value_changed for r in rows),
    )


def measure_protection_efficacy(
    hnet: HardenedNetwork,
    dataset: Dataset,
    records: Sequence[InjectionRecord],
    master_seed: int,
    profile: RangeProfile | None = None,
) -> tuple[EfficacyReport, list[EfficacyRecord]]:
    """Replay campaign injections through the hardened network.

    Faults in protected fmaps hit the primary or the shadow copy with equal
    probability. The residual mismatch rate counts undetected mismatches over all
    injections, so it compares directly with the unhardened mismatch rate.
    """
    if not records:
        raise InvalidRequestError("no injection records to replay")
    quant = None
    if records[0].error_model.quantized:
        if profile is None:
            raise InvalidRequestError(f"{records[0].error_model} replay needs the profile")
        quant = QuantScheme.from_profile(hnet.base, profile)
    seed = derive_seed(master_seed, "copy-hit")
    rows: list[EfficacyRecord] = []
    for fmap, group in group_by_fmap(records).items():
        protected = fmap in hnet.duplication
        for start in range(0, len(group), settings.chunk_size):
            chunk = group[start : start + settings.chunk_size]
            copies = [_copy_hit(seed, r, protected) for r in chunk]
            faults = [
                Fault(fmap, r.h, r.w, r.corrupted_value, copy)
                for r, copy in zip(chunk, copies, strict=True)
            ]
            ids = np.array([r.image_id for r in chunk])
            trace, reports = detect_forward_batch(
                hnet, dataset.images[ids], dataset.labels[ids], faults, quant
            )
            for offset, (record, copy, report) in enumerate(
                zip(chunk, copies, reports, strict=True)
            ):
                rows.append(
                    EfficacyRecord(
                        ordinal=record.ordinal,
                        layer=record.layer,
                        channel=record.channel,
                        protected=protected,
                        copy_hit=copy,
                        value_changed=record.corrupted_value != record.original_value,
                        detected=report.detected,
                        golden_top1=record.golden_top1,
                        injected_top1=int(trace.predicted[offset]),
                        baseline_mismatch=record.outcome == Outcome.MISMATCH,
                    )
                )
    report = _summarize(rows)
    if report.unchanged_value_injections:
        logger.info(
            f"{report.unchanged_value_injections} injections left the value unchanged"
        )
    logger.info(
        "Protection efficacy measured",
        extra={
            "injections": report.injections,
            "protected": report.protected_injections,
            "residual": report.residual_mismatch_rate,
        },
    )
    return report, rows
