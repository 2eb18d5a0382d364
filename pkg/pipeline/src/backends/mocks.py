"""
Deterministic backend doubles.

They make every stage runnable without model weights:
  * MockDepthEstimator - normalized luminance, flip-equivariant by construction.
  * BiasedMockDepthEstimator - luminance plus a left-to-right ramp, not equivariant.
  * GreenChannelDepthEstimator - reads the green channel of a generated image.
  * MockCaptioner - caption from mean luminance.
  * MockConditionedGenerator - writes the conditioning depth into the green channel.
  * GreenChannelDepthModel - green channel converted to metric depth.
  * OracleDepthModel - returns memorized ground truth.
"""

import hashlib
import logging
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from backends.base import (
    CaptionBackend,
    CheckpointRef,
    ConditionedGeneratorBackend,
    DepthEstimatorBackend,
    DepthModelBackend,
    FaultInjection,
)
from models.rasters import (
    Caption,
    InverseRelativeDepthMap,
    MetricDepthMap,
    RgbImage,
    downscale_plane,
    minmax_normalize,
)
from schemas.configs import ConversionConfig, GenerationConfig, TrainConfig
from utils.codecs import decode_depth, load_image
from utils.errors import BackendFailure
from utils.manifest import manifest_digest, read_manifest, resolve_path

logger = logging.getLogger("pipeline.stdout")


def mock_depth_estimate(image: RgbImage) -> InverseRelativeDepthMap:
    """
    Min-max normalized Rec. 601 luminance; constant images give all zeros.

    Examples:
        A 1x2 pure red / black image has luminances [0.299, 0] and maps to [1, 0].
    """
    return InverseRelativeDepthMap(minmax_normalize(image.luminance()), normalized=True)


def mock_depth_estimate_biased(image: RgbImage, ramp_amplitude: float) -> InverseRelativeDepthMap:
    """
    mock_depth_estimate plus `ramp_amplitude * x / (W - 1)`, divided by its maximum
    only when that exceeds 1.
    """
    if ramp_amplitude < 0:
        raise ValueError(f"ramp_amplitude must be >= 0, got {ramp_amplitude}")
    base = mock_depth_estimate(image).data
    width = base.shape[1]
    ramp = ramp_amplitude * np.arange(width) / (width - 1) if width > 1 else np.zeros(1)
    values = base + ramp[np.newaxis, :]
    peak = values.max()
    if peak > 1.0:
        values = values / peak
    return InverseRelativeDepthMap(values, normalized=True)


def mock_caption(image: RgbImage) -> Caption:
    mean = float(image.luminance().mean())
    return Caption(text=f"a scene with mean luminance {mean:.2f}")


def prompt_key(prompt: str) -> int:
    return int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8], "big")


def mock_generate(
    depth: InverseRelativeDepthMap, prompt: str, cfg: GenerationConfig, seed: int
) -> RgbImage:
    """
    Green channel is the conditioning depth exactly; red and blue are uniform noise
    keyed by (prompt, seed).
    """
    if not depth.normalized:
        raise BackendFailure("mock generator needs a normalized conditioning depth")
    rng = np.random.default_rng([prompt_key(prompt), seed % 2**64])
    red, blue = rng.random((2, depth.height, depth.width))
    return RgbImage(np.stack([red, depth.data, blue], axis=-1))


def image_key(image: RgbImage) -> str:
    return hashlib.sha256(image.data.tobytes()).hexdigest()


class MockDepthEstimator(FaultInjection, DepthEstimatorBackend):
    default_id = "mock-luminance"

    def __init__(
        self,
        backend_id: Optional[str] = None,
        reentrant: bool = True,
        fail_call_indices: Optional[Iterable[int]] = None,
    ):
        super().__init__(backend_id, reentrant)
        self._init_faults(fail_call_indices)

    def estimate(self, image: RgbImage) -> InverseRelativeDepthMap:
        self._next_call()
        return mock_depth_estimate(image)


class BiasedMockDepthEstimator(MockDepthEstimator):
    default_id = "mock-biased"

    def __init__(
        self,
        backend_id: Optional[str] = None,
        reentrant: bool = True,
        fail_call_indices: Optional[Iterable[int]] = None,
        ramp_amplitude: float = 0.8,
    ):
        super().__init__(backend_id, reentrant, fail_call_indices)
        self.ramp_amplitude = ramp_amplitude

    def estimate(self, image: RgbImage) -> InverseRelativeDepthMap:
        self._next_call()
        return mock_depth_estimate_biased(image, self.ramp_amplitude)


class GreenChannelDepthEstimator(MockDepthEstimator):
    default_id = "mock-green-depth"

    def estimate(self, image: RgbImage) -> InverseRelativeDepthMap:
        self._next_call()
        return InverseRelativeDepthMap(image.data[:, :, 1], normalized=True)


class MockCaptioner(FaultInjection, CaptionBackend):
    default_id = "mock-caption"

    def __init__(
        self,
        backend_id: Optional[str] = None,
        reentrant: bool = True,
        fail_call_indices: Optional[Iterable[int]] = None,
    ):
        super().__init__(backend_id, reentrant)
        self._init_faults(fail_call_indices)

    def caption(self, image: RgbImage) -> Caption:
        self._next_call()
        return mock_caption(image)


class MockConditionedGenerator(FaultInjection, ConditionedGeneratorBackend):
    """
    Generator double. Training is a no-op returning a checkpoint derived from the
    triplet manifest digest and the config hash.
    """

    default_id = "mock-generator"

    def __init__(
        self,
        backend_id: Optional[str] = None,
        reentrant: bool = True,
        fail_call_indices: Optional[Iterable[int]] = None,
        downscale_factor: int = 1,
    ):
        super().__init__(backend_id, reentrant)
        self._init_faults(fail_call_indices)
        if int(downscale_factor) < 1:
            raise ValueError(f"downscale_factor must be >= 1, got {downscale_factor}")
        self.downscale_factor = int(downscale_factor)

    def train(self, triplet_manifest: Path, cfg: TrainConfig) -> CheckpointRef:
        config_hash = cfg.config_hash()
        state = hashlib.sha256(f"{manifest_digest(triplet_manifest)}|{config_hash}".encode())
        logger.info(f"Mock generator {self.id} trained on {triplet_manifest}")
        return CheckpointRef(
            backend_id=self.id, uri=f"mock://{state.hexdigest()[:16]}", config_hash=config_hash
        )

    def sample(
        self,
        depth: InverseRelativeDepthMap,
        prompt: str,
        cfg: GenerationConfig,
        seed: int,
        checkpoint: CheckpointRef,
    ) -> RgbImage:
        self._next_call()
        if self.downscale_factor > 1:
            depth = InverseRelativeDepthMap(
                downscale_plane(depth.data, self.downscale_factor), normalized=True
            )
        return mock_generate(depth, prompt, cfg, seed)


class GreenChannelDepthModel(FaultInjection, DepthModelBackend):
    """
    Depth model double: converts the green channel with the dataset conversion and
    snaps to the millimeter grid used for stored metric depth, so its predictions on
    mock-generated images equal the stored dataset depth exactly.
    """

    default_id = "mock-green-model"

    def __init__(
        self,
        backend_id: Optional[str] = None,
        reentrant: bool = True,
        fail_call_indices: Optional[Iterable[int]] = None,
        d_min_m: float = 0.3,
        d_max_m: float = 20.0,
        mapping: str = "inverse_linear",
    ):
        super().__init__(backend_id, reentrant)
        self._init_faults(fail_call_indices)
        self.conversion = ConversionConfig(d_min_m=d_min_m, d_max_m=d_max_m, mapping=mapping)
        self.cap_m = d_max_m

    def train(self, dataset_manifest: Path, cfg: TrainConfig) -> CheckpointRef:
        config_hash = cfg.config_hash()
        return CheckpointRef(
            backend_id=self.id,
            uri=f"mock://{manifest_digest(dataset_manifest)[:16]}",
            config_hash=config_hash,
        )

    def predict(
        self, image: RgbImage, checkpoint: Optional[CheckpointRef] = None
    ) -> MetricDepthMap:
        from stages.datasetbuild import inverse_to_metric

        self._next_call()
        green = InverseRelativeDepthMap(image.data[:, :, 1], normalized=True)
        metric = inverse_to_metric(green, self.conversion)
        return MetricDepthMap(np.round(metric.data * 1000.0) / 1000.0, cap_m=metric.cap_m)


class OracleDepthModel(FaultInjection, DepthModelBackend):
    """
    Memorizes the ground truth of every image in the manifest it is trained on and
    returns it for bit-identical images. Holes are filled with the median valid depth.
    """

    default_id = "oracle-depth-model"

    def __init__(
        self,
        backend_id: Optional[str] = None,
        reentrant: bool = True,
        fail_call_indices: Optional[Iterable[int]] = None,
    ):
        super().__init__(backend_id, reentrant)
        self._init_faults(fail_call_indices)
        self.memory: dict[str, MetricDepthMap] = {}

    def remember(self, image: RgbImage, depth: MetricDepthMap):
        self.memory[image_key(image)] = depth

    def train(self, dataset_manifest: Path, cfg: TrainConfig) -> CheckpointRef:
        for record in read_manifest(dataset_manifest):
            if "image" in record.paths and "depth" in record.paths:
                image = load_image(resolve_path(dataset_manifest, record, "image"))
                depth = decode_depth(resolve_path(dataset_manifest, record, "depth"))
                if isinstance(depth, MetricDepthMap):
                    self.remember(image, depth)
        logger.info(f"Oracle {self.id} memorized {len(self.memory)} depth maps")
        return CheckpointRef(
            backend_id=self.id,
            uri=f"mock://{manifest_digest(dataset_manifest)[:16]}",
            config_hash=cfg.config_hash(),
        )

    def predict(
        self, image: RgbImage, checkpoint: Optional[CheckpointRef] = None
    ) -> MetricDepthMap:
        self._next_call()
        depth = self.memory.get(image_key(image))
        if depth is None:
            raise BackendFailure("image was not seen during training", backend_id=self.id)
        fill = float(np.median(depth.data[depth.valid])) if depth.valid.any() else 1.0
        return MetricDepthMap(np.where(depth.valid, depth.data, fill), cap_m=depth.cap_m)
