import numpy as np
import pytest

from fmapshield.core.errors import InvalidRequestError
from fmapshield.schemas.campaign import CampaignConfig, ErrorModel
from fmapshield.schemas.network import FmapId
from fmapshield.schemas.protection import Copy
from fmapshield.services.engine import forward
from fmapshield.services.injector import run_campaign
from fmapshield.services.protection import (
    Fault,
    HardenedNetwork,
    detect_forward,
    detect_forward_batch,
    harden,
    measure_protection_efficacy,
)


def slam(original, model, context, rng, bit=None, code=None):
    """Drive the neuron far outside its calibrated range."""
    return 1000.0 if rng.integers(2) else -1000.0


class TestHarden:
    """Filter duplication."""

    def test_shadow_indices(self, tiny_net):
        """Shadows follow the original filters of their bank."""
        hnet = harden(tiny_net, [FmapId(2, 0), FmapId(0, 1), FmapId(0, 2)])
        assert hnet.duplication == {FmapId(0, 1): 3, FmapId(0, 2): 4, FmapId(2, 0): 2}
        assert hnet.channel_counts() == {0: 5, 2: 3}
        assert np.array_equal(hnet.widened[0].weight[3], tiny_net.layers[0].weight[1])
        assert hnet.protected == [FmapId(0, 1), FmapId(0, 2), FmapId(2, 0)]

    def test_duplicates_collapse(self, tiny_net):
        """Listing an fmap twice protects it once."""
        hnet = harden(tiny_net, [FmapId(0, 1), FmapId(0, 1)])
        assert hnet.channel_counts() == {0: 4, 2: 2}

    def test_unknown_fmap(self, tiny_net):
        """Plans may only name existing fmaps."""
        with pytest.raises(InvalidRequestError):
            harden(tiny_net, [FmapId(0, 7)])

    def test_bad_shadow_layout(self, tiny_net):
        """Shadow indices must be contiguous after the original filters."""
        with pytest.raises(InvalidRequestError):
            HardenedNetwork(tiny_net, {FmapId(0, 1): 5})


class TestDetectForward:
    """Duplicate-compare inference."""

    def test_empty_plan_is_transparent(self, tiny_net, tiny_images):
        """Without protection the network behaves exactly like the base."""
        labels = np.zeros(len(tiny_images), dtype=np.int64)
        trace, reports = detect_forward_batch(harden(tiny_net, []), tiny_images, labels)
        assert np.array_equal(trace.logits, forward(tiny_net, tiny_images, labels).logits)
        assert not any(report.detected for report in reports)

    def test_fault_free_not_detected(self, tiny_net, tiny_images):
        """Shadows agree bitwise with their primaries on clean inputs."""
        hnet = harden(tiny_net, tiny_net.fmap_index)
        labels = np.zeros(len(tiny_images), dtype=np.int64)
        trace, reports = detect_forward_batch(hnet, tiny_images, labels)
        assert np.array_equal(trace.logits, forward(tiny_net, tiny_images, labels).logits)
        assert all(not r.detected and r.max_abs_divergence == 0.0 for r in reports)

    def test_primary_fault_detected(self, tiny_net, tiny_images):
        """A corrupted primary disagrees with its shadow."""
        hnet = harden(tiny_net, [FmapId(0, 1)])
        golden = forward(tiny_net, tiny_images[0], 0)
        value = float(golden.fmap(FmapId(0, 1))[0, 1, 2]) + 5.0
        trace, report = detect_forward(hnet, tiny_images[0], 0, Fault(FmapId(0, 1), 1, 2, value))
        assert report.detected
        assert report.first_divergent_fmap == FmapId(0, 1)
        assert report.max_abs_divergence == pytest.approx(5.0, rel=1e-5)
        assert trace.fmap(FmapId(0, 1))[0, 1, 2] == pytest.approx(value)

    def test_shadow_fault_detected_without_effect(self, tiny_net, tiny_images):
        """A corrupted shadow is caught and never reaches later layers."""
        hnet = harden(tiny_net, [FmapId(2, 1)])
        fault = Fault(FmapId(2, 1), 0, 0, 123.0, Copy.SHADOW)
        trace, report = detect_forward(hnet, tiny_images[3], 1, fault)
        assert report.detected
        assert report.first_divergent_fmap == FmapId(2, 1)
        assert np.array_equal(trace.logits, forward(tiny_net, tiny_images[3], 1).logits)

    def test_unprotected_fault_not_detected(self, tiny_net, tiny_images):
        """Errors upstream of a protected fmap reach both copies alike."""
        hnet = harden(tiny_net, [FmapId(2, 0)])
        fault = Fault(FmapId(0, 0), 2, 2, 50.0)
        trace, report = detect_forward(hnet, tiny_images[0], 0, fault)
        assert not report.detected
        assert not np.array_equal(trace.logits, forward(tiny_net, tiny_images[0], 0).logits)

    def test_tolerance(self, tiny_net, tiny_images):
        """Divergence at or below the tolerance is accepted."""
        hnet = harden(tiny_net, [FmapId(0, 0)], tolerance=1.0)
        golden = forward(tiny_net, tiny_images[0], 0)
        value = float(golden.fmap(FmapId(0, 0))[0, 0, 0]) + 0.5
        _, report = detect_forward(hnet, tiny_images[0], 0, Fault(FmapId(0, 0), 0, 0, value))
        assert not report.detected
        assert report.max_abs_divergence == pytest.approx(0.5, rel=1e-5)

    def test_one_fault_per_sample(self, tiny_net, tiny_images):
        """Faults only touch their own sample."""
        hnet = harden(tiny_net, [FmapId(0, 2)])
        labels = np.zeros(3, dtype=np.int64)
        faults = [None, Fault(FmapId(0, 2), 0, 0, 99.0), None]
        _, reports = detect_forward_batch(hnet, tiny_images[:3], labels, faults)
        assert [r.detected for r in reports] == [False, True, False]

    def test_invalid_faults(self, tiny_net, tiny_images):
        """Shadows of unprotected fmaps and out-of-range neurons are rejected."""
        hnet = harden(tiny_net, [FmapId(0, 0)])
        with pytest.raises(InvalidRequestError):
            detect_forward(hnet, tiny_images[0], 0, Fault(FmapId(0, 1), 0, 0, 1.0, Copy.SHADOW))
        with pytest.raises(InvalidRequestError):
            detect_forward(hnet, tiny_images[0], 0, Fault(FmapId(0, 0), 4, 0, 1.0))
        with pytest.raises(InvalidRequestError):
            detect_forward_batch(hnet, tiny_images[:2], [0, 0], [None])


class TestProtectionEfficacy:
    """Replaying campaigns through hardened networks."""

    def test_full_plan_leaves_no_silent_mismatch(
        self, tiny_net, tiny_fxp_dataset, tiny_profile, flip_config
    ):
        """Protecting every fmap detects every value-changing fault."""
        records = run_campaign(tiny_net, tiny_fxp_dataset, range(12), flip_config, tiny_profile)
        hnet = harden(tiny_net, tiny_net.fmap_index)
        report, rows = measure_protection_efficacy(
            hnet, tiny_fxp_dataset, records, 9, tiny_profile
        )
        assert report.injections == len(records) == len(rows)
        assert report.protected_injections == len(records)
        assert report.residual_mismatch_rate == 0.0
        assert report.detected_fraction == 1.0
        assert report.improvement_factor is None
        assert {row.copy_hit for row in rows} == {Copy.PRIMARY, Copy.SHADOW}

    def test_empty_plan_changes_nothing(self, tiny_net, tiny_dataset, tiny_profile):
        """Without protection the replay reproduces the campaign's mismatches."""
        config = CampaignConfig(error_model=ErrorModel.FP_RAND, injections_per_fmap=16)
        records = run_campaign(
            tiny_net, tiny_dataset, range(12), config, tiny_profile, corruptor=slam
        )
        report, rows = measure_protection_efficacy(
            harden(tiny_net, []), tiny_dataset, records, 0
        )
        assert report.baseline_mismatch_rate > 0.0
        assert report.residual_mismatch_rate == pytest.approx(report.baseline_mismatch_rate)
        assert report.improvement_factor == pytest.approx(1.0)
        assert report.detected_fraction is None
        assert [row.injected_top1 for row in rows] == [r.injected_top1 for r in records]

    def test_partial_plan_improves(self, tiny_net, tiny_dataset, tiny_profile):
        """Protecting some fmaps never raises the residual rate above the baseline."""
        config = CampaignConfig(error_model=ErrorModel.FP_RAND, injections_per_fmap=16)
        records = run_campaign(
            tiny_net, tiny_dataset, range(12), config, tiny_profile, corruptor=slam
        )
        hnet = harden(tiny_net, [FmapId(2, 0), FmapId(2, 1)])
        report, rows = measure_protection_efficacy(hnet, tiny_dataset, records, 0)
        assert report.residual_mismatch_rate <= report.baseline_mismatch_rate
        assert all(row.detected for row in rows if row.protected)

    def test_replay_is_seeded(self, tiny_net, tiny_fxp_dataset, tiny_profile, flip_config):
        """Copy choices depend only on the seed."""
        records = run_campaign(tiny_net, tiny_fxp_dataset, range(12), flip_config, tiny_profile)
        hnet = harden(tiny_net, tiny_net.fmap_index)
        _, first = measure_protection_efficacy(hnet, tiny_fxp_dataset, records, 3, tiny_profile)
        _, second = measure_protection_efficacy(hnet, tiny_fxp_dataset, records, 3, tiny_profile)
        assert first == second

    def test_requirements(self, tiny_net, tiny_fxp_dataset, tiny_profile, flip_config):
        """Replays need records, and quantized records need the profile."""
        hnet = harden(tiny_net, [])
        with pytest.raises(InvalidRequestError):
            measure_protection_efficacy(hnet, tiny_fxp_dataset, [], 0)
        records = run_campaign(tiny_net, tiny_fxp_dataset, range(12), flip_config, tiny_profile)
        with pytest.raises(InvalidRequestError):
            measure_protection_efficacy(hnet, tiny_fxp_dataset, records, 0)
