"""
Pytest configuration and fixtures for pipeline tests.
"""

import os
import sys
from datetime import datetime, timezone

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), "..", "src"))

from backends.mocks import (  # noqa: E402
    GreenChannelDepthEstimator,
    GreenChannelDepthModel,
    MockCaptioner,
    MockConditionedGenerator,
    MockDepthEstimator,
)
from models.rasters import RgbImage  # noqa: E402
from schemas.configs import ConversionConfig, GenerationConfig, TrainConfig  # noqa: E402
from stages.datasetbuild import assemble_dataset  # noqa: E402
from stages.genpipe import (  # noqa: E402
    generate_dataset_samples,
    ingest_conditioning_depths,
    train_generator,
)
from stages.prep import build_triplets  # noqa: E402
from stages.uncertainty import filter_generated  # noqa: E402
from utils.codecs import save_array, save_image  # noqa: E402
from utils.manifest import use_clock  # noqa: E402

FIXED_TIME = datetime(2024, 1, 1, tzinfo=timezone.utc)


@pytest.fixture(autouse=True)
def fixed_clock():
    """Deterministic record timestamps."""
    with use_clock(lambda: FIXED_TIME):
        yield FIXED_TIME


@pytest.fixture(autouse=True)
def no_sentry(mocker):
    """Keep per-item failure reporting away from Sentry."""
    return mocker.patch("stages.common.sentry_sdk.capture_exception")


@pytest.fixture
def rng():
    """Seeded random generator."""
    return np.random.default_rng(1234)


def smooth_image(rng: np.random.Generator, height: int = 12, width: int = 16) -> RgbImage:
    y, x = np.mgrid[0:height, 0:width]
    channels = []
    for _ in range(3):
        a, b, c = rng.uniform(0.1, 0.9, 3)
        plane = a + (b - a) * 0.5 * x / max(width - 1, 1) + (c - a) * 0.5 * y / max(height - 1, 1)
        channels.append(plane)
    return RgbImage(np.clip(np.stack(channels, axis=-1), 0.0, 1.0))


def metric_depth(rng: np.random.Generator, height: int = 12, width: int = 16) -> np.ndarray:
    ramp = np.linspace(rng.uniform(0.5, 2.0), rng.uniform(8.0, 15.0), height)[:, np.newaxis]
    return ramp * np.ones((1, width)) + rng.uniform(0.0, 0.5, (height, width))


@pytest.fixture
def make_image(rng):
    """Factory for smooth random images."""
    return lambda height=12, width=16: smooth_image(rng, height, width)


@pytest.fixture
def make_depth(rng):
    """Factory for metric depth ramps in meters."""
    return lambda height=12, width=16: metric_depth(rng, height, width)


@pytest.fixture
def estimator():
    """Flip-equivariant luminance estimator."""
    return MockDepthEstimator()


@pytest.fixture
def captioner():
    """Mean luminance captioner."""
    return MockCaptioner()


@pytest.fixture
def generator():
    """Generator writing the conditioning depth into the green channel."""
    return MockConditionedGenerator()


@pytest.fixture
def depth_model():
    """Green channel depth model."""
    return GreenChannelDepthModel()


@pytest.fixture
def image_dir(tmp_path, rng):
    """Directory with three smooth 8-bit underwater images."""
    directory = tmp_path / "images"
    for index in range(3):
        save_image(smooth_image(rng), directory / f"uw_{index:02d}.png")
    return directory


@pytest.fixture
def depth_source_dir(tmp_path, rng):
    """Directory with two metric depth arrays in meters."""
    directory = tmp_path / "terrestrial"
    for index in range(2):
        save_array(metric_depth(rng), directory / f"scene_{index:02d}.npy")
    return directory


@pytest.fixture
def triplet_manifest(tmp_path, image_dir, estimator, captioner):
    """Manifest of three prepared triplets."""
    manifest = tmp_path / "work" / "triplets.jsonl"
    build_triplets(image_dir, estimator, captioner, manifest)
    return manifest


@pytest.fixture
def checkpoint(tmp_path, triplet_manifest, generator):
    """Mock generator checkpoint trained on the triplet manifest."""
    return train_generator(
        triplet_manifest,
        TrainConfig(backend_id=generator.id),
        generator,
        tmp_path / "work" / "checkpoints.jsonl",
    )


@pytest.fixture
def small_generation():
    """Two prompts, two samples per depth and prompt."""
    return GenerationConfig(samples_per_condition=2, base_seed=7)


@pytest.fixture
def depth_manifest(tmp_path, depth_source_dir):
    """Manifest of two conditioning depths ingested from metric arrays."""
    manifest = tmp_path / "work" / "depths.jsonl"
    ingest_conditioning_depths(depth_source_dir, manifest, mode="metric")
    return manifest


@pytest.fixture
def gen_manifest(tmp_path, depth_manifest, checkpoint, generator, small_generation):
    """Manifest of eight generated images: two depths, two prompts, two samples."""
    manifest = tmp_path / "work" / "generated.jsonl"
    generate_dataset_samples(depth_manifest, small_generation, generator, checkpoint, manifest)
    return manifest


@pytest.fixture
def dataset_manifest(tmp_path, gen_manifest):
    """Assembled dataset of the eight generated images, split half and half."""
    uncertainty = tmp_path / "work" / "uncertainty.jsonl"
    filter_generated(gen_manifest, GreenChannelDepthEstimator(), uncertainty)
    manifest = tmp_path / "work" / "dataset.jsonl"
    assemble_dataset(gen_manifest, uncertainty, ConversionConfig(), 0.15, 0.5, manifest)
    return manifest
