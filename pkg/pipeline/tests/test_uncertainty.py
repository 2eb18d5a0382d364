"""
Unit tests for flip-consistency depth uncertainty and the validity mask.
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), "..", "src"))

from backends.mocks import (  # noqa: E402
    BiasedMockDepthEstimator,
    GreenChannelDepthEstimator,
    MockDepthEstimator,
)
from models.manifest_record import RecordKind  # noqa: E402
from models.rasters import InverseRelativeDepthMap, RgbImage  # noqa: E402
from models.uncertainty import UncertaintyMap  # noqa: E402
from stages.uncertainty import (  # noqa: E402
    depth_uncertainty,
    filter_generated,
    load_uncertainty,
    masks_by_generated,
    normalize_inverse_depth,
    two_point_variance,
    validity_mask,
)
from utils.codecs import decode_mask  # noqa: E402
from utils.errors import BackendFailure, NonPositiveThreshold  # noqa: E402
from utils.manifest import read_manifest, records_of_kind, resolve_path  # noqa: E402


class TestNormalizeInverseDepth:
    """Test cases for normalize_inverse_depth."""

    @pytest.mark.parametrize(
        "values,expected",
        [
            ([0.2, 0.7], [0.0, 1.0]),
            ([1.0, 2.0, 3.0], [0.0, 0.5, 1.0]),
            ([5.0, 5.0], [0.0, 0.0]),
        ],
    )
    def test_min_max(self, values, expected):
        """Values are stretched to [0, 1]; constant maps become zeros."""
        depth = normalize_inverse_depth(InverseRelativeDepthMap(np.array([values])))
        assert depth.normalized
        assert depth.data[0].tolist() == pytest.approx(expected)

    def test_normalized_map_is_returned_as_is(self):
        """Maps flagged normalized keep their values unless forced."""
        depth = InverseRelativeDepthMap(np.array([[0.2, 0.6]]), normalized=True)
        assert normalize_inverse_depth(depth) is depth
        assert normalize_inverse_depth(depth, force=True).data.tolist() == [[0.0, 1.0]]


class TestTwoPointVariance:
    """Test cases for two_point_variance."""

    @pytest.mark.parametrize("a,b,expected", [(0.4, 0.6, 0.01), (0.0, 0.8, 0.16)])
    def test_population_convention(self, a, b, expected):
        """Population variance of {a, b} is ((a - b) / 2) ** 2."""
        assert two_point_variance(np.array(a), np.array(b)) == pytest.approx(expected)

    def test_sample_convention_is_twice_population(self):
        """Sample variance of {a, b} is (a - b) ** 2 / 2."""
        assert two_point_variance(np.array(0.4), np.array(0.6), "sample") == pytest.approx(0.02)

    def test_bounded_on_normalized_inputs(self, rng):
        """Population variance of two values in [0, 1] never exceeds 0.25."""
        a, b = rng.random((2, 500))
        assert two_point_variance(a, b).max() <= 0.25
        assert two_point_variance(np.array(0.0), np.array(1.0)) == 0.25

    @pytest.mark.parametrize("variance", ["population", "sample"])
    def test_order_of_values_does_not_matter(self, rng, variance):
        """Swapping the two estimates gives the same variance."""
        a, b = rng.random((2, 1000))
        swapped = two_point_variance(b, a, variance)
        assert np.array_equal(two_point_variance(a, b, variance), swapped)

    def test_unknown_convention_raises(self):
        """Only population and sample are known."""
        with pytest.raises(ValueError):
            two_point_variance(np.array(0.0), np.array(1.0), "median")


class TestDepthUncertainty:
    """Test cases for depth_uncertainty."""

    def test_equivariant_estimator_gives_zero(self, make_image):
        """The luminance estimator commutes with flips, so DU is zero everywhere."""
        du = depth_uncertainty(make_image(), MockDepthEstimator())
        assert du.shape == (12, 16)
        assert np.all(du.data == 0.0)

    def test_biased_estimator_on_constant_image(self):
        """Ramp 0.8 on a constant 1x2 image gives estimates [0, 0.8] and [0.8, 0]."""
        image = RgbImage(np.full((1, 2, 3), 0.5))
        du = depth_uncertainty(image, BiasedMockDepthEstimator(ramp_amplitude=0.8))
        assert du.data[0].tolist() == pytest.approx([0.16, 0.16])

    def test_biased_estimator_is_bounded(self, make_image):
        """A non-equivariant estimator yields positive DU no larger than 0.25."""
        du = depth_uncertainty(make_image(), BiasedMockDepthEstimator())
        assert du.data.max() > 0.0
        assert du.data.max() <= 0.25

    def test_bounded_on_random_images(self, rng):
        """DU stays within [0, 0.25] population and [0, 0.5] sample on random images."""
        for _ in range(100):
            height, width = (int(value) for value in rng.integers(1, 12, 2))
            image = RgbImage(rng.random((height, width, 3)))
            estimator = BiasedMockDepthEstimator(ramp_amplitude=rng.uniform(0.0, 2.0))
            population = depth_uncertainty(image, estimator)
            sample = depth_uncertainty(image, estimator, variance="sample")
            assert population.data.min() >= 0.0
            assert population.data.max() <= 0.25
            assert sample.data.max() <= 0.5
            assert np.allclose(sample.data, 2.0 * population.data)

    def test_mirrored_image_gives_mirrored_uncertainty(self, rng):
        """DU of the mirrored image is the mirrored DU of the image."""
        for _ in range(100):
            height, width = (int(value) for value in rng.integers(1, 12, 2))
            image = RgbImage(rng.random((height, width, 3)))
            estimator = BiasedMockDepthEstimator(ramp_amplitude=rng.uniform(0.0, 2.0))
            for normalize in (True, False):
                mirrored = depth_uncertainty(image.hflip(), estimator, normalize=normalize)
                direct = depth_uncertainty(image, estimator, normalize=normalize)
                np.testing.assert_allclose(mirrored.data, direct.hflip().data, atol=1e-12)

    def test_wrong_size_flipped_estimate_raises(self, make_image, mocker):
        """Estimates must match the image size."""
        estimator = MockDepthEstimator()
        mocker.patch.object(
            estimator, "estimate", return_value=InverseRelativeDepthMap(np.zeros((3, 3)))
        )
        with pytest.raises(BackendFailure):
            depth_uncertainty(make_image(), estimator)


class TestValidityMask:
    """Test cases for validity_mask."""

    def test_threshold_keeps_low_uncertainty(self):
        """DU [0.01, 0.16] at threshold 0.15 keeps only the first pixel."""
        mask = validity_mask(UncertaintyMap(np.array([[0.01, 0.16]])), 0.15)
        assert mask.data.tolist() == [[True, False]]
        assert mask.valid_fraction == 0.5

    def test_comparison_is_strict(self):
        """A pixel exactly at the threshold is rejected."""
        mask = validity_mask(UncertaintyMap(np.array([[0.15]])), 0.15)
        assert not mask.data.any()

    def test_larger_threshold_keeps_superset(self, rng):
        """Raising the threshold never drops a kept pixel."""
        du = UncertaintyMap(rng.uniform(0.0, 0.25, (20, 20)))
        small, large = validity_mask(du, 0.05), validity_mask(du, 0.15)
        assert np.all(large.data[small.data])
        assert small.valid_fraction <= large.valid_fraction

    def test_mask_grows_with_threshold(self, rng):
        """Over random maps and threshold pairs, the lower threshold keeps a subset."""
        for _ in range(200):
            du = UncertaintyMap(rng.uniform(0.0, 0.25, (8, 8)))
            low, high = np.sort(rng.uniform(1e-6, 0.3, 2))
            small, large = validity_mask(du, low), validity_mask(du, high)
            assert not np.any(small.data & ~large.data)
            assert small.valid_fraction <= large.valid_fraction

    @pytest.mark.parametrize("threshold", [0.0, -0.1])
    def test_non_positive_threshold_raises(self, threshold):
        """Thresholds must be positive."""
        with pytest.raises(NonPositiveThreshold):
            validity_mask(UncertaintyMap(np.zeros((1, 1))), threshold)


class TestFilterGenerated:
    """Test cases for filter_generated over a generated image manifest."""

    def test_green_estimator_keeps_every_pixel(self, tmp_path, gen_manifest):
        """An equivariant estimator on generated images gives all-valid masks."""
        out = tmp_path / "work" / "uncertainty.jsonl"
        report = filter_generated(gen_manifest, GreenChannelDepthEstimator(), out)
        assert (report.total, report.success, report.failed) == (8, 8, 0)
        assert report.mean_valid_fraction == 1.0
        pairs = masks_by_generated(out)
        assert len(pairs) == 8
        for du_record, mask_record in pairs.values():
            assert np.all(load_uncertainty(out, du_record).data == 0.0)
            valid, sidecar = decode_mask(resolve_path(out, mask_record, "mask"))
            assert valid.all()
            assert sidecar.threshold == 0.15

    def test_masks_match_image_size(self, tmp_path, gen_manifest):
        """Uncertainty and mask rasters have the generated image's dimensions."""
        out = tmp_path / "work" / "uncertainty.jsonl"
        filter_generated(gen_manifest, MockDepthEstimator(), out)
        for du_record, mask_record in masks_by_generated(out).values():
            assert load_uncertainty(out, du_record).shape == (12, 16)
            assert decode_mask(resolve_path(out, mask_record, "mask"))[0].shape == (12, 16)

    def test_rerun_skips_everything(self, tmp_path, gen_manifest):
        """A second run with the same settings adds no records."""
        out = tmp_path / "work" / "uncertainty.jsonl"
        filter_generated(gen_manifest, GreenChannelDepthEstimator(), out)
        before = out.read_bytes()
        report = filter_generated(gen_manifest, GreenChannelDepthEstimator(), out)
        assert report.skipped == 8
        assert out.read_bytes() == before

    def test_new_threshold_reuses_uncertainty(self, tmp_path, gen_manifest):
        """A second threshold adds masks only, and keeps no more pixels than a larger one."""
        out = tmp_path / "work" / "uncertainty.jsonl"
        estimator = BiasedMockDepthEstimator()
        strict = filter_generated(gen_manifest, estimator, out, threshold=0.01)
        loose = filter_generated(gen_manifest, estimator, out, threshold=0.2)
        records = read_manifest(out)
        assert len(records_of_kind(records, RecordKind.UNCERTAINTY)) == 8
        assert len(records_of_kind(records, RecordKind.MASK)) == 16
        assert strict.mean_valid_fraction <= loose.mean_valid_fraction

    def test_recorded_max_du_is_bounded(self, tmp_path, gen_manifest):
        """Normalized estimates keep every recorded DU within 0.25."""
        out = tmp_path / "work" / "uncertainty.jsonl"
        filter_generated(gen_manifest, BiasedMockDepthEstimator(), out)
        for record in records_of_kind(read_manifest(out), RecordKind.UNCERTAINTY):
            assert 0.0 <= record.params["max_du"] <= 0.25

    def test_estimator_failure_costs_one_image(self, tmp_path, gen_manifest):
        """A failing estimator call is a per-image failure."""
        out = tmp_path / "work" / "uncertainty.jsonl"
        report = filter_generated(gen_manifest, MockDepthEstimator(fail_call_indices=[0]), out)
        assert (report.success, report.failed) == (7, 1)
        assert len(masks_by_generated(out)) == 7
