import itertools

import numpy as np
import pytest

from fmapshield.core.errors import InvalidRequestError
from fmapshield.schemas.analysis import SPLIT_RATIO, Technique, VulnCurve
from fmapshield.schemas.campaign import ErrorModel, InjectionRecord, Outcome
from fmapshield.schemas.dataset import Dataset
from fmapshield.schemas.network import FmapId
from fmapshield.schemas.vulnerability import Metric
from fmapshield.services.analysis import (
    build_curve,
    compare_error_models,
    convergence_study,
    coverage_overhead_curve,
    distance_to_baseline,
    greedy_select,
    heuristic_accuracy,
    manhattan_distance,
    measure_pass_times,
    predict_runtime,
    split_dataset,
    validate_coverage,
)
from fmapshield.services.engine import MacCensus, classify, count_macs
from fmapshield.services.metrics import compose_vulnerability, prop_p_by_fmap
from fmapshield.services.quantizer import QuantScheme

A, B, C = FmapId(0, 0), FmapId(0, 1), FmapId(0, 2)


def three_fmap_table(prop_p=(0.5, 0.3, 0.2), macs=(100, 100, 100)):
    """Three fmaps of one conv layer; with equal MACs RelV is proportional to prop_p."""
    census = MacCensus(
        per_fmap=dict(zip((A, B, C), macs)), per_layer={0: sum(macs)}, dense_macs=0, total=sum(macs)
    )
    table = compose_vulnerability(census, dict(zip((A, B, C), prop_p)), "mismatch")
    return table, census


def record(fmap, ordinal, mismatch):
    return InjectionRecord(
        ordinal=ordinal,
        image_id=ordinal,
        layer=fmap.layer,
        channel=fmap.channel,
        h=0,
        w=0,
        error_model=ErrorModel.FP_RAND,
        original_value=0.0,
        corrupted_value=1.0,
        golden_loss=0.1,
        injected_loss=0.1 + ordinal * 0.01 + (1.0 if mismatch else 0.0),
        golden_top1=0,
        injected_top1=1 if mismatch else 0,
        outcome=Outcome.MISMATCH if mismatch else Outcome.MASKED,
    )


def oracle_records(net, per_fmap=8):
    """Fmap i of the network mismatches on its first i+1 ordinals."""
    return [
        record(fmap, ordinal, ordinal <= index)
        for index, fmap in enumerate(net.fmap_index)
        for ordinal in range(per_fmap)
    ]


class TestSplitDataset:
    """ES/TS partition of correctly classified images."""

    def test_counts_and_disjointness(self, trained_desknet, desk_eval, desk_profile, desk_split):
        """80/20 over images classified correctly in float and fake-quantized form."""
        scheme = QuantScheme.from_profile(trained_desknet, desk_profile)
        correct = classify(trained_desknet, desk_eval.images, desk_eval.labels) == desk_eval.labels
        correct &= (
            classify(trained_desknet, desk_eval.images, desk_eval.labels, quant=scheme)
            == desk_eval.labels
        )
        total = int(correct.sum())
        assert len(desk_split.es_image_ids) == int(SPLIT_RATIO * total)
        assert len(desk_split.es_image_ids) + len(desk_split.ts_image_ids) == total
        assert set(desk_split.es_image_ids).isdisjoint(desk_split.ts_image_ids)
        assert all(correct[i] for i in desk_split.es_image_ids + desk_split.ts_image_ids)

    def test_seeded(self, tiny_net, tiny_dataset):
        """Same seed, same split; another seed reshuffles."""
        first = split_dataset(tiny_net, tiny_dataset, seed=1)
        assert split_dataset(tiny_net, tiny_dataset, seed=1) == first
        others = [split_dataset(tiny_net, tiny_dataset, seed=s).ts_image_ids for s in range(2, 8)]
        assert any(ts != first.ts_image_ids for ts in others)

    def test_too_few_correct_images(self, tiny_net, tiny_dataset):
        """A split needs at least ten correctly classified images."""
        wrong = Dataset(tiny_dataset.images, (tiny_dataset.labels + 1) % 3)
        with pytest.raises(InvalidRequestError):
            split_dataset(tiny_net, wrong, seed=0)


class TestCurves:
    """Cumulative vulnerability curves and their distance."""

    def test_curve_accumulates_baseline_in_candidate_order(self):
        """Baseline RelV (0.5, 0.3, 0.2) ordered (B, A, C) gives (0.3, 0.8, 1.0)."""
        baseline = {A: 0.5, B: 0.3, C: 0.2}
        curve = build_curve({A: 2.0, B: 3.0, C: 1.0}, baseline)
        assert curve.fmap_order == [B, A, C]
        assert curve.cumulative == pytest.approx([0.3, 0.8, 1.0])

    def test_ties_break_by_fmap(self):
        """Equal scores keep ascending fmap order."""
        curve = build_curve({C: 1.0, A: 1.0, B: 1.0}, {A: 0.2, B: 0.3, C: 0.5})
        assert curve.fmap_order == [A, B, C]

    def test_mismatched_fmaps(self):
        """Scores and baseline must cover the same fmaps."""
        with pytest.raises(InvalidRequestError):
            build_curve({A: 1.0}, {A: 0.5, B: 0.5})

    def test_manhattan_small_case(self):
        """Mean absolute gap between the curves."""
        first = VulnCurve(fmap_order=[A, B], cumulative=[0.5, 1.0])
        second = VulnCurve(fmap_order=[B, A], cumulative=[0.6, 1.0])
        assert manhattan_distance(first, second) == pytest.approx(0.05)

    def test_manhattan_is_a_metric(self):
        """Symmetric, zero on itself, triangle inequality."""
        rng = np.random.default_rng(0)
        curves = [
            VulnCurve(fmap_order=[A, B, C], cumulative=sorted(rng.uniform(size=3)))
            for _ in range(6)
        ]
        for x, y, z in itertools.product(curves, repeat=3):
            assert manhattan_distance(x, x) == 0.0
            assert manhattan_distance(x, y) == pytest.approx(manhattan_distance(y, x))
            assert manhattan_distance(x, z) <= (
                manhattan_distance(x, y) + manhattan_distance(y, z) + 1e-12
            )

    def test_length_mismatch(self):
        """Curves over different fmap counts are not comparable."""
        with pytest.raises(InvalidRequestError):
            manhattan_distance(
                VulnCurve(fmap_order=[A], cumulative=[1.0]),
                VulnCurve(fmap_order=[A, B], cumulative=[0.5, 1.0]),
            )

    def test_perfect_ordering_has_zero_distance(self):
        """A candidate ranking fmaps like the baseline sits on the baseline curve."""
        baseline = {A: 0.5, B: 0.3, C: 0.2}
        assert distance_to_baseline({A: 9.0, B: 5.0, C: 0.1}, baseline) == 0.0
        assert distance_to_baseline({A: 0.1, B: 5.0, C: 9.0}, baseline) > 0.0
        results = heuristic_accuracy(baseline, {"self": baseline, "reversed": {A: 1, B: 2, C: 3}})
        assert results[0].distance == 0.0
        assert results[1].name == "reversed"


class TestGreedySelect:
    """Coverage-targeted fmap selection."""

    @pytest.mark.parametrize(
        "target, expected",
        [(0.5, [A]), (0.6, [A, B]), (0.8, [A, B]), (0.81, [A, B, C]), (1.0, [A, B, C])],
    )
    def test_targets(self, target, expected):
        """Shortest descending-RelV prefix reaching the target."""
        table, census = three_fmap_table()
        plan = greedy_select(table, census, target)
        assert plan.selected_fmaps == expected
        assert plan.predicted_coverage >= target - 1e-9
        assert plan.mac_overhead_fraction == pytest.approx(len(expected) / 3)

    def test_prefix_is_minimal(self):
        """No smaller set of fmaps reaches the target."""
        rng = np.random.default_rng(4)
        prop_p = rng.uniform(size=3)
        table, census = three_fmap_table(tuple(prop_p), (50, 120, 300))
        rel_v = table.rel_v()
        for target in (0.2, 0.45, 0.7, 0.9, 1.0):
            plan = greedy_select(table, census, target)
            for size in range(len(plan.selected_fmaps)):
                for subset in itertools.combinations(rel_v, size):
                    assert sum(rel_v[f] for f in subset) < target - 1e-9

    def test_monotone_in_target(self):
        """Raising the target never shrinks the plan or its overhead."""
        table, census = three_fmap_table((0.7, 0.1, 0.4), (10, 20, 30))
        previous = None
        for target in np.linspace(0.05, 1.0, 20):
            plan = greedy_select(table, census, float(target))
            if previous is not None:
                kept = plan.selected_fmaps[: len(previous.selected_fmaps)]
                assert kept == previous.selected_fmaps
                assert plan.mac_overhead_fraction >= previous.mac_overhead_fraction
            previous = plan

    @pytest.mark.parametrize("target", [0.0, -0.1, 1.01])
    def test_target_range(self, target):
        """Targets lie in (0, 1]."""
        table, census = three_fmap_table()
        with pytest.raises(InvalidRequestError):
            greedy_select(table, census, target)

    def test_undefined_rel_v(self):
        """Selection needs a nonzero V_CNN."""
        table, census = three_fmap_table((0.0, 0.0, 0.0))
        with pytest.raises(InvalidRequestError):
            greedy_select(table, census, 0.5)

    def test_overhead_curve(self):
        """Every prefix from empty to all fmaps."""
        table, census = three_fmap_table()
        points = coverage_overhead_curve(table, census)
        assert [p.fmap for p in points] == [None, A, B, C]
        assert points[0].predicted_coverage == 0.0
        assert points[-1].predicted_coverage == pytest.approx(1.0)
        assert [p.mac_overhead_fraction for p in points] == pytest.approx([0, 1 / 3, 2 / 3, 1.0])


class TestValidateCoverage:
    """Predicted against observed coverage."""

    def test_share_of_mismatches(self):
        """With equal MACs and equal campaign sizes, actual coverage is the plain mismatch share."""
        table, census = three_fmap_table()
        plan = greedy_select(table, census, 0.5)
        records = [
            record(A, 0, True),
            record(A, 1, True),
            record(B, 0, True),
            record(B, 1, False),
            record(C, 0, False),
            record(C, 1, False),
        ]
        result = validate_coverage(plan, records, census)
        assert result.ts_mismatches == 3
        assert result.covered_mismatches == 2
        assert result.actual_coverage == pytest.approx(2 / 3)
        assert result.predicted_coverage == plan.predicted_coverage

    def test_weights_mismatch_rates_by_macs(self):
        """An fmap with three times the MACs carries three times the weight per mismatch rate."""
        table, census = three_fmap_table((0.5, 0.3, 0.2), (100, 300, 100))
        plan = greedy_select(table, census, 0.5)
        assert plan.selected_fmaps == [B]
        records = [
            record(A, 0, True),
            record(A, 1, False),
            record(B, 0, True),
            record(B, 1, False),
            record(C, 0, False),
            record(C, 1, False),
        ]
        result = validate_coverage(plan, records, census)
        assert result.covered_mismatches == 1
        assert result.actual_coverage == pytest.approx(0.75)

    def test_plan_from_ts_itself_is_exact(self):
        """Selecting on the TS mismatch table predicts its own coverage exactly."""
        outcomes = {A: (1, 1, 0, 0), B: (1, 0, 0, 0), C: (1, 1, 1, 0)}
        records = [
            record(fmap, ordinal, bool(hit))
            for fmap, hits in outcomes.items()
            for ordinal, hit in enumerate(hits)
        ]
        _, census = three_fmap_table(macs=(100, 300, 100))
        ts_table = compose_vulnerability(
            census, prop_p_by_fmap(records, Metric.MISMATCH), "mismatch"
        )
        for target in (0.3, 0.6, 0.9, 1.0):
            plan = greedy_select(ts_table, census, target)
            result = validate_coverage(plan, records, census)
            assert result.actual_coverage == pytest.approx(plan.predicted_coverage)

    def test_no_mismatches(self):
        """Without TS mismatches the actual coverage is undefined."""
        table, census = three_fmap_table()
        plan = greedy_select(table, census, 0.5)
        result = validate_coverage(plan, [record(A, 0, False)], census)
        assert result.actual_coverage is None

    def test_foreign_fmap(self):
        """TS records must come from the planned model."""
        table, census = three_fmap_table()
        plan = greedy_select(table, census, 0.5)
        with pytest.raises(InvalidRequestError):
            validate_coverage(plan, [record(FmapId(3, 0), 0, True)], census)


class TestConvergence:
    """Estimate quality against injections per fmap."""

    def test_full_sweep_point_matches_oracle(self, tiny_net):
        """Using every oracle record reproduces the oracle curve."""
        census = count_macs(tiny_net)
        points = convergence_study(census, oracle_records(tiny_net), [2, 8])
        by_key = {(p.metric, p.injections_per_fmap): p.distance for p in points}
        assert by_key[("mismatch", 8)] == 0.0
        assert set(by_key) == {
            ("mismatch", 2), ("mismatch", 8), ("delta_loss", 2), ("delta_loss", 8)
        }
        assert all(d >= 0.0 for d in by_key.values())

    def test_uses_first_ordinals(self, tiny_net):
        """A sweep point reads only the first k records of each fmap."""
        census = count_macs(tiny_net)
        records = oracle_records(tiny_net)
        shuffled = records[::-1]
        assert convergence_study(census, records, [3]) == convergence_study(census, shuffled, [3])

    def test_sweep_bounds(self, tiny_net):
        """Sweep points must lie within the oracle size."""
        census = count_macs(tiny_net)
        records = oracle_records(tiny_net)
        with pytest.raises(InvalidRequestError):
            convergence_study(census, records, [])
        with pytest.raises(InvalidRequestError):
            convergence_study(census, records, [9])
        with pytest.raises(InvalidRequestError):
            convergence_study(census, records, [0])

    def test_fault_free_oracle(self, tiny_net):
        """An oracle without mismatches has no baseline."""
        census = count_macs(tiny_net)
        records = [record(f, i, False) for f in tiny_net.fmap_index for i in range(4)]
        with pytest.raises(InvalidRequestError):
            convergence_study(census, records, [2])

    def test_compare_error_models(self):
        """Identical tables sit at distance zero; the reference must exist."""
        table, _ = three_fmap_table()
        other, _ = three_fmap_table((0.1, 0.3, 0.6))
        tables = {"fp-rand": table, "fxp-flip": table, "x": other}
        distances = compare_error_models(tables, "fp-rand")
        by_pair = {(d.name, d.reference): d.distance for d in distances}
        assert by_pair[("fp-rand", "fxp-flip")] == 0.0
        assert by_pair[("fp-rand", "x")] > 0.0
        with pytest.raises(InvalidRequestError):
            compare_error_models({"fp-rand": table}, "missing")


class TestRuntime:
    """Analytical runtime model."""

    def test_injection_cost(self):
        """Golden passes plus one inference per injection."""
        seconds = predict_runtime(Technique.MISMATCH, 10, 0.5, 1.0, 4, 3, 10)
        assert seconds == pytest.approx((10 + 12) * 0.5)
        assert predict_runtime(Technique.DELTA_LOSS, 10, 0.5, 1.0, 0, 3, 10) == pytest.approx(5.0)

    def test_gain_cost(self):
        """One forward and M-1 backward passes per sample."""
        seconds = predict_runtime(Technique.GAIN, 4, 1.0, 2.0, 0, 0, 10)
        assert seconds == pytest.approx(4 * (1.0 + 9 * 2.0))
        gradient = predict_runtime(Technique.GRADIENT, 4, 1.0, 2.0, 0, 0, 10)
        assert gradient == pytest.approx(12.0)

    @pytest.mark.parametrize(
        "technique", [Technique.MAX_NEURON, Technique.FMAP_RANGE, Technique.AVERAGE_L2]
    )
    def test_forward_only_scales_with_forward_cost(self, technique):
        """Doubling the forward cost doubles forward-only estimates."""
        once = predict_runtime(technique, 7, 0.3, 5.0, 0, 0, 10)
        twice = predict_runtime(technique, 7, 0.6, 5.0, 0, 0, 10)
        assert twice == pytest.approx(2 * once)

    def test_invalid_inputs(self):
        """Negative counts and single-class networks are rejected."""
        with pytest.raises(InvalidRequestError):
            predict_runtime(Technique.GAIN, -1, 1.0, 1.0, 0, 0, 10)
        with pytest.raises(InvalidRequestError):
            predict_runtime(Technique.GAIN, 1, 1.0, 1.0, 0, 0, 1)
        with pytest.raises(InvalidRequestError):
            predict_runtime(Technique.GAIN, 1, -1.0, 1.0, 0, 0, 10)

    def test_measured_pass_times(self, tiny_net, tiny_dataset):
        """Per-sample timings are positive."""
        times = measure_pass_times(tiny_net, tiny_dataset, repeats=1)
        assert times.forward_seconds > 0.0
        assert times.backward_seconds > 0.0
        assert times.batch_size == 12
