import numpy as np
import pytest

from fmapshield.core.errors import InvalidRequestError
from fmapshield.schemas.dataset import Dataset
from fmapshield.schemas.network import FmapId
from fmapshield.schemas.quant import RangeProfile
from fmapshield.services.engine import forward
from fmapshield.services.quantizer import (
    MIN_SCALE,
    QMAX,
    QMIN,
    QuantScheme,
    calibrate,
    dequantize,
    evaluate_accuracy,
    fake_quant_forward,
    merge_profiles,
    quantize,
    quantize_array,
    symmetric_scale,
)


class TestRounding:
    """INT8 code arithmetic."""

    @pytest.mark.parametrize(
        "value, code",
        [(0.5, 1), (-0.5, -1), (2.5, 3), (-2.5, -3), (1.49, 1), (-1.51, -2), (0.0, 0)],
    )
    def test_ties_round_away_from_zero(self, value, code):
        """Half-way values move away from zero."""
        assert quantize(value, 1.0) == code

    def test_codes_clamp_to_int8(self):
        """Out-of-range values saturate."""
        codes = quantize_array(np.array([1e6, -1e6, 127.4, -128.6]), 1.0)
        assert codes.tolist() == [QMAX, QMIN, 127, QMIN]

    def test_dequantize(self):
        """code * scale."""
        assert dequantize(-4, 0.25) == -1.0

    def test_symmetric_scale(self):
        """The larger magnitude maps to code 127."""
        assert symmetric_scale(-2.54, 1.0) == pytest.approx(0.02)
        assert quantize(-2.54, symmetric_scale(-2.54, 1.0)) == -127

    def test_zero_range_gets_minimum_scale(self):
        """An always-zero fmap still has a positive scale."""
        assert symmetric_scale(0.0, 0.0) == MIN_SCALE


class TestCalibrate:
    """Range calibration."""

    def test_ranges_match_forward_pass(self, tiny_net, tiny_images):
        """Observed min/max equal the extremes of the float conv outputs."""
        profile = calibrate(tiny_net, tiny_images, chunk_size=5)
        trace = forward(tiny_net, tiny_images, np.zeros(len(tiny_images), dtype=np.int64))
        assert len(profile.fmaps) == 5
        assert profile.calibration_sample_count == 12
        for entry in profile.fmaps:
            values = trace.fmap(entry.fmap)
            assert entry.min_observed == pytest.approx(float(values.min()))
            assert entry.max_observed == pytest.approx(float(values.max()))
            assert entry.scale == symmetric_scale(entry.min_observed, entry.max_observed)

    def test_empty_calibration_set(self, tiny_net):
        """Calibration needs images."""
        with pytest.raises(InvalidRequestError):
            calibrate(tiny_net, np.zeros((0, 1, 6, 6), dtype=np.float32))

    def test_merge_covers_union(self, tiny_net, tiny_images):
        """Merging two halves equals calibrating on the whole set."""
        merged = merge_profiles(
            calibrate(tiny_net, tiny_images[:6]), calibrate(tiny_net, tiny_images[6:])
        )
        whole = calibrate(tiny_net, tiny_images)
        assert merged.calibration_sample_count == 12
        for a, b in zip(merged.fmaps, whole.fmaps):
            assert a.min_observed == pytest.approx(b.min_observed)
            assert a.max_observed == pytest.approx(b.max_observed)

    def test_merge_rejects_mismatched_profiles(self, tiny_profile):
        """Profiles over different fmaps cannot be merged."""
        partial = RangeProfile(calibration_sample_count=1, fmaps=tiny_profile.fmaps[:2])
        with pytest.raises(InvalidRequestError):
            merge_profiles(tiny_profile, partial)


class TestQuantScheme:
    """Fake-quantized inference."""

    def test_missing_fmap_rejected(self, tiny_net, tiny_profile):
        """Every fmap of the network needs a range."""
        partial = RangeProfile(calibration_sample_count=1, fmaps=tiny_profile.fmaps[:-1])
        with pytest.raises(InvalidRequestError):
            QuantScheme.from_profile(tiny_net, partial)

    def test_fmaps_hold_representable_values(self, tiny_net, tiny_images, tiny_profile):
        """Every fake-quantized activation is an integer multiple of its scale."""
        scheme = QuantScheme.from_profile(tiny_net, tiny_profile)
        trace = fake_quant_forward(tiny_net, tiny_images, np.zeros(12, dtype=np.int64), scheme)
        for fmap in tiny_net.fmap_index:
            codes = trace.fmap(fmap) / scheme.scale(fmap)
            assert np.allclose(codes, np.round(codes), atol=1e-3)
            assert np.all(np.abs(codes) <= 128.001)

    def test_fake_quant_is_idempotent(self, tiny_net, tiny_images, tiny_profile):
        """Quantizing an already quantized fmap changes nothing."""
        scheme = QuantScheme.from_profile(tiny_net, tiny_profile)
        x = forward(tiny_net, tiny_images, np.zeros(12, dtype=np.int64)).layer_outputs[0]
        once = scheme.fake_quant(0, x)
        assert np.array_equal(scheme.fake_quant(0, once), once)

    def test_channel_subset(self, tiny_net, tiny_images, tiny_profile):
        """A channel list picks the matching scales."""
        scheme = QuantScheme.from_profile(tiny_net, tiny_profile)
        x = forward(tiny_net, tiny_images, np.zeros(12, dtype=np.int64)).layer_outputs[0]
        full = scheme.fake_quant(0, x)
        assert np.array_equal(scheme.fake_quant(0, x[:, [2]], channels=[2]), full[:, [2]])
        expected = tiny_profile.by_fmap()[FmapId(0, 2)].scale
        assert scheme.scale(FmapId(0, 2)) == pytest.approx(expected)


class TestEvaluateAccuracy:
    """Top-1 accuracy reports."""

    def test_self_labeled_set_is_perfect(self, tiny_net, tiny_dataset, tiny_profile):
        """Labels taken from float predictions score 1.0 in float."""
        scheme = QuantScheme.from_profile(tiny_net, tiny_profile)
        report = evaluate_accuracy(tiny_net, tiny_dataset, scheme)
        assert report.sample_count == 12
        assert report.float_accuracy == 1.0
        assert 0.0 <= report.quantized_accuracy <= 1.0

    def test_float_only(self, tiny_net, tiny_dataset):
        """Without a scheme there is no quantized figure."""
        assert evaluate_accuracy(tiny_net, tiny_dataset).quantized_accuracy is None

    def test_quantization_keeps_desknet_accuracy(self, trained_desknet, desk_eval, desk_profile):
        """INT8 fake quantization costs little accuracy on the desk network."""
        scheme = QuantScheme.from_profile(trained_desknet, desk_profile)
        report = evaluate_accuracy(trained_desknet, desk_eval, scheme)
        assert report.quantized_accuracy >= report.float_accuracy - 0.05

    def test_empty_set(self, tiny_net):
        """Accuracy of nothing is undefined."""
        empty = Dataset(np.zeros((0, 1, 6, 6), dtype=np.float32), np.zeros(0, dtype=np.int64))
        with pytest.raises(InvalidRequestError):
            evaluate_accuracy(tiny_net, empty)
