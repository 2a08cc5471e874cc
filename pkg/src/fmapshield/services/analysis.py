"""Evaluation protocol: splits, cumulative curves, convergence, coverage selection."""

import itertools
import logging
import math
import time
from collections.abc import Iterable, Mapping, Sequence

import numpy as np

from fmapshield.config import settings
from fmapshield.core.errors import InvalidRequestError
from fmapshield.core.seeding import stage_rng
from fmapshield.schemas.analysis import (
    SPLIT_RATIO,
    ConvergencePoint,
    CoveragePlan,
    CoveragePoint,
    CoverageValidation,
    CurveDistance,
    PassTimes,
    SplitSpec,
    Technique,
    VulnCurve,
)
from fmapshield.schemas.campaign import InjectionRecord, Outcome
from fmapshield.schemas.dataset import Dataset
from fmapshield.schemas.network import FmapId
from fmapshield.schemas.vulnerability import Metric, VulnerabilityTable
from fmapshield.services.engine import MacCensus, Network, Objective, backward, classify, forward
from fmapshield.services.metrics import compose_vulnerability, group_by_fmap, prop_p_by_fmap

logger = logging.getLogger(__name__)

MIN_SPLIT_IMAGES = 10
COVERAGE_TOLERANCE = 1e-9


def split_dataset(net: Network, dataset: Dataset, seed: int, quant=None) -> SplitSpec:
    """Shuffle the correctly classified images and cut them 80/20 into ES and TS.

    With `quant`, an image must also be classified correctly under fake quantization.
    """
    if len(dataset) == 0:
        raise InvalidRequestError("dataset is empty")
    correct = classify(net, dataset.images, dataset.labels) == dataset.labels
    if quant is not None:
        correct &= classify(net, dataset.images, dataset.labels, quant=quant) == dataset.labels
    ids = np.flatnonzero(correct)
    if len(ids) < MIN_SPLIT_IMAGES:
        raise InvalidRequestError(
            f"only {len(ids)} correctly classified images; need at least {MIN_SPLIT_IMAGES}"
        )
    shuffled = ids[stage_rng(seed, "split").permutation(len(ids))]
    es_count = math.floor(SPLIT_RATIO * len(ids))
    split = SplitSpec(
        es_image_ids=sorted(int(i) for i in shuffled[:es_count]),
        ts_image_ids=sorted(int(i) for i in shuffled[es_count:]),
        seed=seed,
    )
    logger.info(
        "Dataset split",
        extra={"correct": len(ids), "es": len(split.es_image_ids), "ts": len(split.ts_image_ids)},
    )
    return split


def build_curve(
    ordering_scores: Mapping[FmapId, float], baseline_rel_v: Mapping[FmapId, float]
) -> VulnCurve:
    """Accumulate baseline RelV in descending score order (ties: ascending FmapId)."""
    if set(ordering_scores) != set(baseline_rel_v):
        raise InvalidRequestError("ordering scores and baseline cover different fmaps")
    order = sorted(ordering_scores, key=lambda fmap: (-ordering_scores[fmap], fmap))
    cumulative = list(itertools.accumulate(baseline_rel_v[fmap] for fmap in order))
    return VulnCurve(fmap_order=order, cumulative=cumulative)


def manhattan_distance(first: VulnCurve, second: VulnCurve) -> float:
    if len(first.cumulative) != len(second.cumulative):
        raise InvalidRequestError("curves differ in length")
    if not first.cumulative:
        return 0.0
    a, b = np.asarray(first.cumulative), np.asarray(second.cumulative)
    return float(np.mean(np.abs(a - b)))


def distance_to_baseline(
    scores: Mapping[FmapId, float], baseline_rel_v: Mapping[FmapId, float]
) -> float:
    return manhattan_distance(
        build_curve(scores, baseline_rel_v), build_curve(baseline_rel_v, baseline_rel_v)
    )


def _defined_rel_v(table: VulnerabilityTable, name: str) -> dict[FmapId, float]:
    if not table.rel_v_defined:
        raise InvalidRequestError(f"{name}: V_CNN is zero, relative vulnerability undefined")
    return table.rel_v()


def convergence_study(
    census: MacCensus,
    oracle_records: Sequence[InjectionRecord],
    sweep: Iterable[int],
    metrics: Iterable[Metric] = (Metric.MISMATCH, Metric.DELTA_LOSS),
) -> list[ConvergencePoint]:
    """Distance to the oracle curve for estimates built from the first k records per fmap.

    The oracle baseline is mismatch RelV over every oracle record.
    """
    sweep = sorted(set(sweep))
    if not sweep:
        raise InvalidRequestError("convergence sweep is empty")
    groups = group_by_fmap(oracle_records)
    if not groups:
        raise InvalidRequestError("no oracle records")
    oracle_size = min(len(group) for group in groups.values())
    if sweep[0] < 1 or sweep[-1] > oracle_size:
        raise InvalidRequestError(
            f"sweep points must lie in [1, {oracle_size}] (oracle injections per fmap)"
        )
    oracle = compose_vulnerability(
        census, prop_p_by_fmap(oracle_records, Metric.MISMATCH), Metric.MISMATCH
    )
    baseline = _defined_rel_v(oracle, "oracle")
    points = []
    for k in sweep:
        for metric in metrics:
            # V_fmap orders the same way as RelV and stays defined when V_CNN is zero
            table = compose_vulnerability(census, prop_p_by_fmap(oracle_records, metric, k), metric)
            scores = {row.fmap: row.v_fmap for row in table.fmaps}
            points.append(
                ConvergencePoint(
                    metric=str(metric),
                    injections_per_fmap=k,
                    distance=distance_to_baseline(scores, baseline),
                )
            )
    logger.info("Convergence study finished", extra={"sweep": sweep, "oracle_size": oracle_size})
    return points


def compare_error_models(
    tables: Mapping[str, VulnerabilityTable], reference: str
) -> list[CurveDistance]:
    """Pairwise distances between RelV curves of different error models.

    Every curve accumulates the reference model's RelV in its own model's order.
    """
    if reference not in tables:
        raise InvalidRequestError(f"reference {reference!r} not among the tables")
    baseline = _defined_rel_v(tables[reference], reference)
    curves = {
        name: build_curve({row.fmap: row.v_fmap for row in table.fmaps}, baseline)
        for name, table in tables.items()
    }
    return [
        CurveDistance(name=a, reference=b, distance=manhattan_distance(curves[a], curves[b]))
        for a, b in itertools.combinations(sorted(curves), 2)
    ]


def heuristic_accuracy(
    baseline_rel_v: Mapping[FmapId, float], candidates: Mapping[str, Mapping[FmapId, float]]
) -> list[CurveDistance]:
    """How far each candidate's ordering lands from the baseline's own curve."""
    return [
        CurveDistance(
            name=name, reference="baseline", distance=distance_to_baseline(scores, baseline_rel_v)
        )
        for name, scores in candidates.items()
    ]


def _descending(table: VulnerabilityTable) -> list[tuple[FmapId, float]]:
    rel_v = _defined_rel_v(table, table.metric)
    return sorted(rel_v.items(), key=lambda item: (-item[1], item[0]))


def greedy_select(
    table: VulnerabilityTable, census: MacCensus, target_coverage: float
) -> CoveragePlan:
    """Shortest prefix of the descending-RelV order reaching the target coverage."""
    if not 0.0 < target_coverage <= 1.0:
        raise InvalidRequestError(f"target coverage {target_coverage} outside (0, 1]")
    selected: list[FmapId] = []
    covered = 0.0
    for fmap, rel_v in _descending(table):
        if covered >= target_coverage - COVERAGE_TOLERANCE:
            break
        selected.append(fmap)
        covered += rel_v
    plan = CoveragePlan(
        target_coverage=target_coverage,
        metric=table.metric,
        selected_fmaps=selected,
        predicted_coverage=min(covered, 1.0),
        mac_overhead_fraction=census.fraction(selected),
    )
    logger.info(
        "Coverage plan selected",
        extra={
            "target": target_coverage,
            "fmaps": len(selected),
            "overhead": round(plan.mac_overhead_fraction, 6),
        },
    )
    return plan


def coverage_overhead_curve(table: VulnerabilityTable, census: MacCensus) -> list[CoveragePoint]:
    """Predicted coverage and MAC overhead for every greedy prefix, starting empty."""
    points = [
        CoveragePoint(fmap_count=0, fmap=None, predicted_coverage=0.0, mac_overhead_fraction=0.0)
    ]
    covered = 0.0
    macs = 0
    for count, (fmap, rel_v) in enumerate(_descending(table), start=1):
        covered += rel_v
        macs += census.per_fmap[fmap]
        points.append(
            CoveragePoint(
                fmap_count=count,
                fmap=fmap,
                predicted_coverage=min(covered, 1.0),
                mac_overhead_fraction=macs / census.total,
            )
        )
    return points


def validate_coverage(
    plan: CoveragePlan, ts_records: Sequence[InjectionRecord], census: MacCensus
) -> CoverageValidation:
    """MAC-weighted share of TS mismatches that fall in the plan's fmaps.

    Each fmap's TS mismatch rate is weighted by its MAC count, as V_fmap weights PropP.
    """
    selected = set(plan.selected_fmaps)
    mismatches = [r for r in ts_records if r.outcome == Outcome.MISMATCH]
    covered = sum(r.fmap in selected for r in mismatches)
    if not mismatches:
        logger.warning("TS campaign has no mismatches; actual coverage undefined")
        actual = None
    else:
        rates = prop_p_by_fmap(ts_records, Metric.MISMATCH)
        unknown = sorted(set(rates) - set(census.per_fmap))
        if unknown:
            raise InvalidRequestError(f"TS records name fmaps outside the model: {unknown[:5]}")
        weighted = {fmap: census.per_fmap[fmap] * rate for fmap, rate in rates.items()}
        actual = math.fsum(v for f, v in weighted.items() if f in selected) / math.fsum(
            weighted.values()
        )
    return CoverageValidation(
        predicted_coverage=plan.predicted_coverage,
        actual_coverage=actual,
        ts_mismatches=len(mismatches),
        covered_mismatches=covered,
    )


def predict_runtime(
    technique: Technique,
    sample_count: int,
    forward_seconds: float,
    backward_seconds: float,
    injections_per_fmap: int,
    fmap_count: int,
    class_count: int,
) -> float:
    """Analytical runtime of one vulnerability estimate, in seconds."""
    if min(sample_count, injections_per_fmap, fmap_count) < 0 or class_count < 2:
        raise InvalidRequestError("runtime inputs must be nonnegative, with at least 2 classes")
    if forward_seconds < 0 or backward_seconds < 0:
        raise InvalidRequestError("pass times must be nonnegative")
    match technique:
        case Technique.MAX_NEURON | Technique.FMAP_RANGE | Technique.AVERAGE_L2:
            return sample_count * forward_seconds
        case Technique.GRADIENT:
            return sample_count * (forward_seconds + backward_seconds)
        case Technique.GAIN | Technique.MOD_GAIN:
            return sample_count * (forward_seconds + (class_count - 1) * backward_seconds)
        case Technique.MISMATCH | Technique.DELTA_LOSS:
            # golden passes once per sample, then one perturbed inference per injection
            return (sample_count + fmap_count * injections_per_fmap) * forward_seconds
    raise InvalidRequestError(f"unknown technique {technique}")


def measure_pass_times(net: Network, samples: Dataset, repeats: int = 3) -> PassTimes:
    """Amortized per-sample forward and backward cost on a batch of samples."""
    if len(samples) == 0:
        raise InvalidRequestError("sample set is empty")
    batch = min(len(samples), settings.chunk_size)
    images, labels = samples.images[:batch], samples.labels[:batch]
    forward_best = backward_best = math.inf
    for _ in range(max(repeats, 1)):
        started = time.perf_counter()
        trace = forward(net, images, labels)
        middle = time.perf_counter()
        backward(net, trace, Objective.loss())
        finished = time.perf_counter()
        forward_best = min(forward_best, middle - started)
        backward_best = min(backward_best, finished - middle)
    return PassTimes(
        forward_seconds=max(forward_best, 1e-9) / batch,
        backward_seconds=max(backward_best, 1e-9) / batch,
        batch_size=batch,
    )
