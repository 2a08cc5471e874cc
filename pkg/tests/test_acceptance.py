"""Desk-scale reproductions of the qualitative claims. Run with `pytest -m slow`."""

import statistics

import pytest

from fmapshield.codecs.dataset_codec import synthetic_digits
from fmapshield.schemas.campaign import CampaignConfig, DatasetSplit, ErrorModel
from fmapshield.schemas.vulnerability import HeuristicKind, Metric
from fmapshield.services.analysis import (
    compare_error_models,
    coverage_overhead_curve,
    distance_to_baseline,
    greedy_select,
    split_dataset,
    validate_coverage,
)
from fmapshield.services.engine import count_macs
from fmapshield.services.injector import run_campaign
from fmapshield.services.metrics import compose_vulnerability, compute_heuristics, prop_p_by_fmap
from fmapshield.services.protection import harden, measure_protection_efficacy
from fmapshield.services.quantizer import QuantScheme, calibrate, evaluate_accuracy
from fmapshield.services.trainer import build_desknet, train_sgd

pytestmark = pytest.mark.slow

SEEDS = (11, 12, 13, 14, 15)


@pytest.fixture(scope="module")
def desk():
    """Fully trained desknet with its profile, held-out set and ES/TS split."""
    train_set = synthetic_digits(3000, seed=0)
    held_out = synthetic_digits(1000, seed=1)
    net = train_sgd(build_desknet(seed=0), train_set, epochs=12, learning_rate=0.05, seed=0)
    profile = calibrate(net, train_set.images)
    scheme = QuantScheme.from_profile(net, profile)
    split = split_dataset(net, held_out, seed=2, quant=scheme)
    return net, held_out, profile, split


def campaign(desk, which, model, per_fmap, seed=0):
    net, held_out, profile, split = desk
    ids = split.es_image_ids if which == DatasetSplit.ES else split.ts_image_ids
    config = CampaignConfig(
        error_model=model, injections_per_fmap=per_fmap, split=which, master_seed=seed
    )
    return run_campaign(net, held_out, ids, config, profile)


def table(desk, records, metric=Metric.MISMATCH):
    census = count_macs(desk[0])
    return compose_vulnerability(census, prop_p_by_fmap(records, metric), metric)


def scores(vuln_table):
    return {row.fmap: row.v_fmap for row in vuln_table.fmaps}


@pytest.fixture(scope="module")
def ts_flip(desk):
    return campaign(desk, DatasetSplit.TS, ErrorModel.FXP_FLIP, 2048)


@pytest.fixture(scope="module")
def es_flip(desk):
    return campaign(desk, DatasetSplit.ES, ErrorModel.FXP_FLIP, 2048)


class TestDesknet:
    """The trained desk-scale network."""

    def test_accuracy_gate(self, desk):
        """Held-out float and fake-quantized accuracy reach 95%."""
        net, held_out, profile, _ = desk
        report = evaluate_accuracy(net, held_out, QuantScheme.from_profile(net, profile))
        assert report.float_accuracy >= 0.95
        assert report.quantized_accuracy >= 0.95


class TestConvergence:
    """Delta-loss estimates settle sooner than mismatch estimates."""

    def test_delta_loss_closer_at_256(self, desk):
        """Averaged over seeds, delta-loss at 256 injections lands nearer the oracle."""
        oracle = table(desk, campaign(desk, DatasetSplit.TS, ErrorModel.FXP_FLIP, 8192, seed=1))
        baseline = oracle.rel_v()
        distances = {Metric.MISMATCH: [], Metric.DELTA_LOSS: []}
        for seed in SEEDS:
            records = campaign(desk, DatasetSplit.TS, ErrorModel.FXP_FLIP, 256, seed=seed)
            for metric, values in distances.items():
                values.append(distance_to_baseline(scores(table(desk, records, metric)), baseline))
        mean = {metric: statistics.fmean(values) for metric, values in distances.items()}
        assert mean[Metric.DELTA_LOSS] < mean[Metric.MISMATCH]


class TestErrorModels:
    """Relative vulnerability barely depends on the error model."""

    def test_fp_rand_tracks_fxp_flip(self, desk, ts_flip):
        """FP_RAND and FXP_FLIP RelV curves stay within 0.05."""
        fp_rand = campaign(desk, DatasetSplit.TS, ErrorModel.FP_RAND, 2048)
        tables = {"fxp-flip": table(desk, ts_flip), "fp-rand": table(desk, fp_rand)}
        pairs = compare_error_models(tables, "fxp-flip")
        distance = next(pair.distance for pair in pairs if pair.name == "fp-rand")
        assert distance < 0.05


class TestCoverage:
    """Greedy selection and its validation on TS."""

    def test_overhead_is_sublinear(self, desk, es_flip):
        """90% coverage costs under 90% extra MACs; no prefix costs more than it covers."""
        census = count_macs(desk[0])
        es_table = table(desk, es_flip)
        plan = greedy_select(es_table, census, 0.9)
        assert plan.mac_overhead_fraction < 0.9
        for point in coverage_overhead_curve(es_table, census):
            assert point.mac_overhead_fraction <= point.predicted_coverage + 1e-9

    def test_prediction_matches_ts(self, desk, es_flip, ts_flip):
        """ES-predicted coverage is within 0.10 of the MAC-weighted TS mismatch share."""
        census = count_macs(desk[0])
        plan = greedy_select(table(desk, es_flip), census, 0.9)
        validation = validate_coverage(plan, ts_flip, census)
        assert abs(validation.predicted_coverage - validation.actual_coverage) < 0.10


class TestHeuristicRanking:
    """Injection estimates on ES beat non-injection heuristics."""

    def test_ordering(self, desk):
        """Delta-loss ES <= mismatch ES <= best heuristic; Gradient at or below the median."""
        net, held_out, ranges, split = desk
        ts = campaign(desk, DatasetSplit.TS, ErrorModel.FXP_FLIP, 1024)
        baseline = table(desk, ts, Metric.DELTA_LOSS).rel_v()
        profile = compute_heuristics(net, held_out.subset(split.es_image_ids), ranges=ranges)
        heuristic = {
            kind: distance_to_baseline(profile.scores[kind], baseline) for kind in HeuristicKind
        }
        injected = {Metric.MISMATCH: [], Metric.DELTA_LOSS: []}
        for seed in SEEDS:
            es = campaign(desk, DatasetSplit.ES, ErrorModel.FXP_FLIP, 256, seed=seed)
            for metric, values in injected.items():
                values.append(distance_to_baseline(scores(table(desk, es, metric)), baseline))
        delta_loss = statistics.fmean(injected[Metric.DELTA_LOSS])
        mismatch = statistics.fmean(injected[Metric.MISMATCH])
        assert delta_loss <= mismatch <= min(heuristic.values())
        assert heuristic[HeuristicKind.GRADIENT] <= statistics.median(heuristic.values())


class TestProtection:
    """Selective duplication against a recorded TS campaign."""

    def test_full_plan_removes_mismatches(self, desk, ts_flip):
        """Protecting every vulnerable fmap leaves no silent mismatch."""
        net, held_out, profile, _ = desk
        plan = greedy_select(table(desk, ts_flip), count_macs(net), 1.0)
        report, _ = measure_protection_efficacy(harden(net, plan), held_out, ts_flip, 0, profile)
        assert report.residual_mismatch_rate == 0.0

    def test_partial_plan_matches_coverage(self, desk, es_flip, ts_flip):
        """Improvement at 70% coverage is 1 / (1 - covered mismatch share) within 15%."""
        net, held_out, profile, _ = desk
        plan = greedy_select(table(desk, es_flip), count_macs(net), 0.7)
        validation = validate_coverage(plan, ts_flip, count_macs(net))
        share = validation.covered_mismatches / validation.ts_mismatches
        report, _ = measure_protection_efficacy(harden(net, plan), held_out, ts_flip, 0, profile)
        assert report.improvement_factor == pytest.approx(1 / (1 - share), rel=0.15)
