"""
Unit tests for depth conversion, split assignment and dataset assembly.
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), "..", "src"))

from backends.mocks import GreenChannelDepthEstimator, MockDepthEstimator  # noqa: E402
from models.rasters import InverseRelativeDepthMap, MetricDepthMap  # noqa: E402
from models.records import Split  # noqa: E402
from schemas.configs import ConversionConfig, DepthMapping  # noqa: E402
from stages.datasetbuild import (  # noqa: E402
    assemble_dataset,
    assign_splits,
    dataset_stats,
    inverse_to_metric,
    metric_to_normalized_inverse,
    stats_table,
)
from stages.uncertainty import filter_generated  # noqa: E402
from utils.codecs import decode_depth, decode_mask  # noqa: E402
from utils.errors import InvalidConfig, InvalidRaster, MissingUncertainty  # noqa: E402
from utils.manifest import manifest_validate, read_manifest, resolve_path  # noqa: E402


def normalized(values) -> InverseRelativeDepthMap:
    return InverseRelativeDepthMap(np.array([values], dtype=float), normalized=True)


@pytest.fixture
def uncertainty_manifest(tmp_path, gen_manifest):
    """Uncertainty and masks of the generated images from an equivariant estimator."""
    manifest = tmp_path / "work" / "uncertainty.jsonl"
    filter_generated(gen_manifest, GreenChannelDepthEstimator(), manifest)
    return manifest


class TestDepthConversion:
    """Test cases for inverse_to_metric and metric_to_normalized_inverse."""

    def test_endpoints_are_exact(self):
        """n = 1 is d_min and n = 0 is d_max."""
        depth = inverse_to_metric(normalized([1.0, 0.0]), ConversionConfig())
        assert depth.data.tolist() == [[0.3, 20.0]]
        assert depth.cap_m == 20.0

    def test_midpoint_is_interpolated_in_inverse_depth(self):
        """n = 0.5 lands near 0.5912 m, far closer than the linear midpoint."""
        depth = inverse_to_metric(normalized([0.5]), ConversionConfig())
        assert depth.data[0, 0] == pytest.approx(0.5912, abs=1e-4)

    def test_linear_mapping(self):
        """The linear mapping puts n = 0.5 halfway between the bounds."""
        cfg = ConversionConfig(mapping=DepthMapping.LINEAR)
        depth = inverse_to_metric(normalized([1.0, 0.5, 0.0]), cfg)
        assert depth.data[0].tolist() == pytest.approx([0.3, 10.15, 20.0])

    @pytest.mark.parametrize("mapping", list(DepthMapping))
    def test_strictly_decreasing(self, mapping):
        """Larger normalized inverse depth is always closer."""
        cfg = ConversionConfig(mapping=mapping)
        depth = inverse_to_metric(normalized(np.linspace(0, 1, 50)), cfg)
        assert np.all(np.diff(depth.data[0]) < 0)
        assert depth.data.min() >= 0.3
        assert depth.data.max() <= 20.0

    def test_unnormalized_input_raises(self):
        """Only normalized maps can be converted."""
        with pytest.raises(InvalidRaster):
            inverse_to_metric(InverseRelativeDepthMap(np.array([[0.5]])), ConversionConfig())

    def test_inverted_bounds_raise(self):
        """d_min must be below d_max."""
        with pytest.raises(InvalidConfig):
            inverse_to_metric(normalized([0.5]), ConversionConfig(d_min_m=5.0, d_max_m=1.0))

    def test_round_trip_through_normalized_inverse(self, rng):
        """Metric maps spanning [d_min, d_max] come back within 1e-9 after two conversions."""
        for _ in range(300):
            d_min = rng.uniform(0.1, 2.0)
            d_max = d_min + rng.uniform(1.0, 60.0)
            data = rng.uniform(d_min, d_max, (6, 8))
            data.flat[rng.choice(data.size, 2, replace=False)] = (d_min, d_max)
            depth = MetricDepthMap(data, cap_m=d_max)
            cfg = ConversionConfig(d_min_m=d_min, d_max_m=d_max)
            restored = inverse_to_metric(metric_to_normalized_inverse(depth), cfg)
            assert np.allclose(restored.data, data, rtol=1e-9, atol=0.0)
            assert restored.data.min() == d_min
            assert restored.data.max() == d_max

    def test_metric_to_inverse_puts_holes_farthest(self):
        """Near pixels become 1, far pixels 0 and holes 0."""
        depth = MetricDepthMap.ground_truth(np.array([[1.0, 2.0, np.nan]]))
        inverse = metric_to_normalized_inverse(depth)
        assert inverse.normalized
        assert inverse.data.tolist() == [[1.0, 0.0, 0.0]]


class TestAssignSplits:
    """Test cases for assign_splits."""

    def test_eight_ids_at_three_quarters(self):
        """8 records with ratio 0.75 give 6 train and 2 val."""
        splits = assign_splits([f"pair-{index}" for index in range(8)], 0.75)
        values = list(splits.values())
        assert values.count(Split.TRAIN) == 6
        assert values.count(Split.VAL) == 2

    def test_independent_of_input_order(self):
        """Splits depend on the ids, not on their order."""
        ids = [f"pair-{index}" for index in range(20)]
        assert assign_splits(ids, 0.5) == assign_splits(list(reversed(ids)), 0.5)

    @pytest.mark.parametrize("ratio,expected", [(0.0, Split.VAL), (1.0, Split.TRAIN)])
    def test_extreme_ratios(self, ratio, expected):
        """Ratio 0 sends everything to val and ratio 1 everything to train."""
        splits = assign_splits(["a", "b", "c"], ratio)
        assert set(splits.values()) == {expected}


class TestAssembleDataset:
    """Test cases for assemble_dataset and dataset_stats."""

    def test_one_pair_per_generated_image(self, tmp_path, gen_manifest, uncertainty_manifest):
        """Eight generated images with stored uncertainty give eight valid pairs."""
        out = tmp_path / "work" / "dataset.jsonl"
        report = assemble_dataset(
            gen_manifest, uncertainty_manifest, ConversionConfig(), 0.15, 0.5, out
        )
        assert (report.pairs, report.success, report.failed) == (8, 8, 0)
        assert report.train + report.val == 8
        assert report.mean_valid_fraction == 1.0
        assert sum(report.depth_histogram.counts) == 8 * 12 * 16
        assert manifest_validate(out).ok

    def test_pair_depth_is_capped_metric(self, tmp_path, gen_manifest, uncertainty_manifest):
        """Stored pair depths are metric and inside [d_min, d_max]."""
        out = tmp_path / "work" / "dataset.jsonl"
        assemble_dataset(gen_manifest, uncertainty_manifest, ConversionConfig(), 0.15, 0.5, out)
        for pair in read_manifest(out):
            depth = decode_depth(resolve_path(out, pair, "depth"))
            assert isinstance(depth, MetricDepthMap)
            assert depth.data.min() >= 0.3
            assert depth.data.max() <= 20.0
            assert pair.params["cap_m"] == 20.0
            assert pair.params["split"] in ("train", "val")

    def test_stored_masks_are_rethresholded(self, tmp_path, gen_manifest, uncertainty_manifest):
        """A threshold other than the filter's is recorded on the new masks."""
        out = tmp_path / "work" / "dataset.jsonl"
        assemble_dataset(gen_manifest, uncertainty_manifest, ConversionConfig(), 0.05, 0.5, out)
        for pair in read_manifest(out):
            _, sidecar = decode_mask(resolve_path(out, pair, "mask"))
            assert sidecar.threshold == 0.05
            assert pair.params["threshold"] == 0.05

    def test_missing_uncertainty_without_estimator_raises(self, tmp_path, gen_manifest):
        """Without stored uncertainty an estimator is required."""
        with pytest.raises(MissingUncertainty):
            assemble_dataset(
                gen_manifest, None, ConversionConfig(), 0.15, 0.5, tmp_path / "d.jsonl"
            )

    def test_estimator_scores_uncovered_images(self, tmp_path, gen_manifest):
        """Images without stored uncertainty are scored with the given estimator."""
        out = tmp_path / "work" / "dataset.jsonl"
        report = assemble_dataset(
            gen_manifest, None, ConversionConfig(), 0.15, 0.5, out, estimator=MockDepthEstimator()
        )
        assert report.pairs == 8
        assert report.mean_valid_fraction == 1.0

    def test_rerun_is_idempotent(self, tmp_path, gen_manifest, uncertainty_manifest):
        """A second assembly with the same settings writes nothing new."""
        out = tmp_path / "work" / "dataset.jsonl"
        assemble_dataset(gen_manifest, uncertainty_manifest, ConversionConfig(), 0.15, 0.75, out)
        before = out.read_bytes()
        report = assemble_dataset(
            gen_manifest, uncertainty_manifest, ConversionConfig(), 0.15, 0.75, out
        )
        assert report.skipped == 8
        assert (report.train, report.val) == (6, 2)
        assert out.read_bytes() == before

    def test_stats_summarize_the_dataset(self, tmp_path, gen_manifest, uncertainty_manifest):
        """Stats count pairs per split and per prompt."""
        out = tmp_path / "work" / "dataset.jsonl"
        assemble_dataset(gen_manifest, uncertainty_manifest, ConversionConfig(), 0.15, 0.75, out)
        stats = dataset_stats(out)
        assert stats.pairs == 8
        assert stats.counts_per_split == {"train": 6, "val": 2}
        assert stats.cap_respected
        assert sorted(stats.prompt_frequency.values()) == [0.5, 0.5]
        assert stats.valid_fraction.min == 1.0
        assert len(stats.per_image_depth) == 8
        assert "pairs: 8 (cap respected: True)" in stats_table(stats)
