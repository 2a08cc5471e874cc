"""Per-fmap vulnerability: injection metrics, non-injection heuristics, composition."""

import logging
import math
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence

import numpy as np

from fmapshield.config import settings
from fmapshield.core.errors import InvalidRequestError
from fmapshield.schemas.campaign import InjectionRecord, Outcome
from fmapshield.schemas.dataset import Dataset
from fmapshield.schemas.network import FmapId
from fmapshield.schemas.quant import RangeProfile
from fmapshield.schemas.vulnerability import (
    FmapVulnerability,
    HeuristicKind,
    HeuristicProfile,
    LayerVulnerability,
    Metric,
    VulnerabilityTable,
)
from fmapshield.services.engine import MacCensus, Network, Objective, backward, forward

logger = logging.getLogger(__name__)

GAP_EPSILON = 1e-12

FORWARD_HEURISTICS = (HeuristicKind.MAX_NEURON, HeuristicKind.FMAP_RANGE, HeuristicKind.AVERAGE_L2)


def _single_fmap(records: Sequence[InjectionRecord]) -> FmapId:
    if not records:
        raise InvalidRequestError("no injection records")
    fmaps = {r.fmap for r in records}
    if len(fmaps) != 1:
        raise InvalidRequestError(f"records span {len(fmaps)} fmaps; expected one")
    return fmaps.pop()


def mismatch_prop_p(records: Sequence[InjectionRecord]) -> float:
    _single_fmap(records)
    return sum(r.outcome == Outcome.MISMATCH for r in records) / len(records)


def delta_loss(records: Sequence[InjectionRecord]) -> float:
    """Mean |golden loss - injected loss| over one fmap's injections."""
    _single_fmap(records)
    return math.fsum(r.loss_delta for r in records) / len(records)


def group_by_fmap(records: Iterable[InjectionRecord]) -> dict[FmapId, list[InjectionRecord]]:
    groups: dict[FmapId, list[InjectionRecord]] = defaultdict(list)
    for record in records:
        groups[record.fmap].append(record)
    return {fmap: sorted(group, key=lambda r: r.ordinal) for fmap, group in sorted(groups.items())}


def prop_p_by_fmap(
    records: Iterable[InjectionRecord], metric: Metric, limit: int | None = None
) -> dict[FmapId, float]:
    """Injection metric per fmap, using only the first `limit` ordinals when given."""
    estimate = mismatch_prop_p if metric == Metric.MISMATCH else delta_loss
    result = {}
    for fmap, group in group_by_fmap(records).items():
        if limit is not None:
            if len(group) < limit:
                raise InvalidRequestError(f"{fmap} has {len(group)} records, fewer than {limit}")
            group = group[:limit]
        result[fmap] = estimate(group)
    return result


def _chunks(dataset: Dataset):
    if len(dataset) == 0:
        raise InvalidRequestError("sample set is empty")
    for start in range(0, len(dataset), settings.chunk_size):
        rows = slice(start, start + settings.chunk_size)
        yield dataset.images[rows], dataset.labels[rows]


def heuristic_forward(
    net: Network, samples: Dataset, kinds: Iterable[HeuristicKind] = FORWARD_HEURISTICS
) -> HeuristicProfile:
    """MaxNeuron, FmapRange and AverageL2 from forward passes only."""
    kinds = list(kinds)
    if any(kind.needs_backward for kind in kinds):
        raise InvalidRequestError("heuristic_forward handles forward-only heuristics")
    highs: dict[int, np.ndarray] = {}
    lows: dict[int, np.ndarray] = {}
    norm_sums: dict[int, np.ndarray] = {}
    for images, labels in _chunks(samples):
        trace = forward(net, images, labels)
        for layer in net.conv_layers:
            out = trace.layer_outputs[layer].astype(np.float64)
            high, low = out.max(axis=(0, 2, 3)), out.min(axis=(0, 2, 3))
            norms = np.sqrt(np.square(out).sum(axis=(2, 3))).sum(axis=0)
            highs[layer] = np.maximum(highs[layer], high) if layer in highs else high
            lows[layer] = np.minimum(lows[layer], low) if layer in lows else low
            norm_sums[layer] = norm_sums[layer] + norms if layer in norm_sums else norms
    count = len(samples)
    per_kind = {
        HeuristicKind.MAX_NEURON: highs,
        HeuristicKind.FMAP_RANGE: {layer: highs[layer] - lows[layer] for layer in highs},
        HeuristicKind.AVERAGE_L2: {layer: norm_sums[layer] / count for layer in norm_sums},
    }
    scores = {
        kind: {
            fmap: float(per_kind[kind][fmap.layer][fmap.channel]) for fmap in net.fmap_index
        }
        for kind in kinds
    }
    return HeuristicProfile(sample_count=count, scores=scores)


def heuristic_gradient(
    net: Network, samples: Dataset, ranges: RangeProfile | None = None
) -> dict[FmapId, float]:
    """Mean over samples of the mean |dL/da| over an fmap's neurons.

    With a range profile each score is multiplied by the fmap's calibrated max |a|,
    the bound on an injected error's size under every error model.
    """
    sums: dict[int, np.ndarray] = {}
    for images, labels in _chunks(samples):
        trace = forward(net, images, labels)
        grads = backward(net, trace, Objective.loss())
        for layer, grad in grads.by_layer.items():
            per_channel = np.abs(grad.astype(np.float64)).mean(axis=(2, 3)).sum(axis=0)
            sums[layer] = sums[layer] + per_channel if layer in sums else per_channel
    count = len(samples)
    scores = {fmap: float(sums[fmap.layer][fmap.channel] / count) for fmap in net.fmap_index}
    if ranges is None:
        return scores
    bounds = ranges.by_fmap()
    if set(bounds) != set(scores):
        raise InvalidRequestError("range profile does not match the model's fmaps")
    return {
        fmap: score * max(abs(bounds[fmap].min_observed), abs(bounds[fmap].max_observed))
        for fmap, score in scores.items()
    }


def heuristic_gain(
    net: Network, samples: Dataset, variant: HeuristicKind = HeuristicKind.GAIN
) -> tuple[dict[FmapId, float], int]:
    """Noise gain per fmap, plus the number of skipped near-tie logit terms.

    For each sample and each class i other than the prediction, the squared gradient
    of (z_i - z_pred) over the fmap is divided by the squared logit gap; ModGain also
    weights every neuron by its squared activation. Terms are summed over i and
    averaged over samples.
    """
    if variant not in (HeuristicKind.GAIN, HeuristicKind.MOD_GAIN):
        raise InvalidRequestError(f"{variant} is not a gain heuristic")
    sums = {layer: np.zeros(net.output_shapes[layer][0]) for layer in net.conv_layers}
    skipped = 0
    for images, labels in _chunks(samples):
        trace = forward(net, images, labels)
        logits = trace.logits.astype(np.float64)
        rows = np.arange(len(labels))
        for i in range(net.class_count):
            gaps = logits[:, i] - logits[rows, trace.predicted]
            others = trace.predicted != i
            usable = others & (np.abs(gaps) >= GAP_EPSILON)
            skipped += int(np.sum(others & ~usable))
            if not usable.any():
                continue
            subset = trace.select(np.flatnonzero(usable))
            grads = backward(net, subset, Objective.logit_diff(i))
            gap_sq = np.square(gaps[usable])[:, None, None, None]
            for layer, grad in grads.by_layer.items():
                term = np.square(grad.astype(np.float64))
                if variant == HeuristicKind.MOD_GAIN:
                    term = term * np.square(subset.layer_outputs[layer].astype(np.float64))
                sums[layer] += (term / gap_sq).sum(axis=(0, 2, 3))
    if skipped:
        logger.warning(f"{variant}: skipped {skipped} terms with |z_i - z_pred| < {GAP_EPSILON}")
    count = len(samples)
    return {fmap: float(sums[fmap.layer][fmap.channel] / count) for fmap in net.fmap_index}, skipped


def compute_heuristics(
    net: Network,
    samples: Dataset,
    kinds: Iterable[HeuristicKind] = tuple(HeuristicKind),
    ranges: RangeProfile | None = None,
) -> HeuristicProfile:
    """Selected heuristics in one profile; `ranges` weights Gradient by error size."""
    kinds = list(kinds)
    forward_kinds = [kind for kind in kinds if not kind.needs_backward]
    scores = {}
    if forward_kinds:
        scores.update(heuristic_forward(net, samples, forward_kinds).scores)
    skipped = 0
    for kind in kinds:
        if kind == HeuristicKind.GRADIENT:
            scores[kind] = heuristic_gradient(net, samples, ranges)
        elif kind.needs_backward:
            scores[kind], missed = heuristic_gain(net, samples, kind)
            skipped += missed
    logger.info(
        "Heuristics computed",
        extra={"samples": len(samples), "kinds": [str(k) for k in kinds], "skipped": skipped},
    )
    return HeuristicProfile(
        sample_count=len(samples), scores={k: scores[k] for k in kinds}, skipped_gain_terms=skipped
    )


def _nonnegative(prop_p: Mapping[FmapId, float], metric: str) -> Mapping[FmapId, float]:
    """Injection metrics must be nonnegative; signed heuristics are shifted up by their minimum."""
    low = min(prop_p.values(), default=0.0)
    if low >= 0.0:
        return prop_p
    if metric not in set(HeuristicKind):
        raise InvalidRequestError(f"{metric} values must be nonnegative")
    logger.info(f"{metric}: shifted scores by {-low:.6g} to make them nonnegative")
    return {fmap: value - low for fmap, value in prop_p.items()}


def compose_vulnerability(
    census: MacCensus,
    prop_p: Mapping[FmapId, float],
    metric: str,
    also: Mapping[str, Mapping[FmapId, float]] | None = None,
) -> VulnerabilityTable:
    """V_fmap = OrigP x PropP, V_CNN = sum, RelV = V_fmap / V_CNN.

    `also` attaches further metric columns to each row without affecting V_fmap.
    """
    if set(prop_p) != set(census.per_fmap):
        missing = sorted(set(census.per_fmap) - set(prop_p))
        raise InvalidRequestError(f"prop_p must cover every conv fmap; missing {missing[:5]}")
    if not all(math.isfinite(value) for value in prop_p.values()):
        raise InvalidRequestError("prop_p values must be finite")
    prop_p = _nonnegative(prop_p, metric)
    fmaps = sorted(census.per_fmap)
    orig_p = {fmap: census.per_fmap[fmap] / census.total for fmap in fmaps}
    v_fmap = {fmap: orig_p[fmap] * prop_p[fmap] for fmap in fmaps}
    v_cnn = math.fsum(v_fmap[fmap] for fmap in fmaps)
    defined = v_cnn > 0.0
    if not defined:
        logger.warning(f"V_CNN is zero for metric {metric}; RelV left undefined")
    rows = []
    for fmap in fmaps:
        columns = {metric: float(prop_p[fmap])}
        for name, values in (also or {}).items():
            columns[name] = float(values[fmap])
        rows.append(
            FmapVulnerability(
                layer=fmap.layer,
                channel=fmap.channel,
                macs=census.per_fmap[fmap],
                orig_p=orig_p[fmap],
                prop_p=columns,
                v_fmap=v_fmap[fmap],
                rel_v=v_fmap[fmap] / v_cnn if defined else None,
            )
        )
    return VulnerabilityTable(
        metric=metric,
        fmaps=rows,
        v_cnn=v_cnn,
        dense_mac_fraction=census.dense_macs / census.total,
        rel_v_defined=defined,
    )


def aggregate_to_layers(table: VulnerabilityTable) -> list[LayerVulnerability]:
    grouped: dict[int, list[FmapVulnerability]] = defaultdict(list)
    for row in table.fmaps:
        grouped[row.layer].append(row)
    return [
        LayerVulnerability(
            layer=layer,
            fmap_count=len(rows),
            v_layer=math.fsum(r.v_fmap for r in rows),
            rel_v=math.fsum(r.rel_v for r in rows) if table.rel_v_defined else None,
        )
        for layer, rows in sorted(grouped.items())
    ]
