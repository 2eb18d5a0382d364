"""
Raster domain types: color images, the two depth representations and captions.

All rasters hold float64 numpy arrays that are made read-only on construction, so
instances are immutable and can be shared between worker threads.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, field_validator
from utils.errors import InvalidRaster

DEFAULT_DEPTH_CAP_M = 20.0

# Rec. 601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def frozen_array(data) -> np.ndarray:
    array = np.array(data, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


def check_plane(data: np.ndarray, name: str):
    if data.ndim != 2:
        raise InvalidRaster(f"{name} must be a 2-D array, got shape {data.shape}")
    if data.shape[0] < 1 or data.shape[1] < 1:
        raise InvalidRaster(f"{name} must be at least 1x1, got shape {data.shape}")


@dataclass(frozen=True, eq=False)
class RgbImage:
    """
    H×W×3 color raster with values in [0, 1].
    """

    data: np.ndarray

    def __post_init__(self):
        data = frozen_array(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise InvalidRaster(f"RgbImage needs shape (H, W, 3), got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise InvalidRaster(f"RgbImage must be at least 1x1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidRaster("RgbImage contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise InvalidRaster(
                f"RgbImage values must lie in [0, 1], got [{data.min()}, {data.max()}]"
            )
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return 3

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def luminance(self) -> np.ndarray:
        # elementwise, so the value of a pixel never depends on memory layout
        r, g, b = LUMA_WEIGHTS
        return r * self.data[:, :, 0] + g * self.data[:, :, 1] + b * self.data[:, :, 2]

    def hflip(self) -> "RgbImage":
        return RgbImage(self.data[:, ::-1, :])


@dataclass(frozen=True, eq=False)
class InverseRelativeDepthMap:
    """
    Inverse relative depth (larger is nearer) with arbitrary scale.

    When `normalized` is set the values lie in [0, 1]; maps produced by
    normalize_inverse_depth additionally span exactly [0, 1] unless constant.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = frozen_array(self.data)
        check_plane(data, "InverseRelativeDepthMap")
        if not np.all(np.isfinite(data)):
            raise InvalidRaster("InverseRelativeDepthMap contains non-finite values")
        if data.min() < 0.0:
            raise InvalidRaster("InverseRelativeDepthMap contains negative values")
        if self.normalized and data.max() > 1.0:
            raise InvalidRaster(
                f"normalized InverseRelativeDepthMap exceeds 1.0 (max {data.max()})"
            )
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def hflip(self) -> "InverseRelativeDepthMap":
        return InverseRelativeDepthMap(self.data[:, ::-1], normalized=self.normalized)


@dataclass(frozen=True, eq=False)
class MetricDepthMap:
    """
    Depth in meters, capped at `cap_m`.

    Dense maps must be finite, positive and capped everywhere. Sparse maps (ground
    truth from stereo or SfM) may contain holes: non-finite or non-positive entries.
    """

    data: np.ndarray
    cap_m: float = DEFAULT_DEPTH_CAP_M
    sparse: bool = False
    valid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        data = frozen_array(self.data)
        check_plane(data, "MetricDepthMap")
        if not (self.cap_m > 0):
            raise InvalidRaster(f"cap_m must be positive, got {self.cap_m}")
        valid = np.isfinite(data) & (data > 0)
        if not self.sparse and not np.all(valid):
            raise InvalidRaster("dense MetricDepthMap must be finite and > 0 everywhere")
        if np.any(data[valid] > self.cap_m):
            raise InvalidRaster(
                f"MetricDepthMap exceeds its cap of {self.cap_m} m (max {data[valid].max()})"
            )
        valid.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @classmethod
    def ground_truth(cls, data, cap_m: float = math.inf) -> "MetricDepthMap":
        """
        Builds a sparse, uncapped map suitable for evaluation ground truth.
        """
        return cls(data, cap_m=cap_m, sparse=True)


class Caption(BaseModel):
    """
    Descriptive text for an image.
    """

    text: str

    model_config = {"frozen": True}

    @field_validator("text")
    @classmethod
    def text_not_blank(cls, value: str) -> str:
        if len(value.strip()) < 1:
            raise ValueError("caption text is empty")
        return value

    def __str__(self) -> str:
        return self.text


def minmax_normalize(data: np.ndarray) -> np.ndarray:
    """
    (v - min) / (max - min) per pixel; a constant plane maps to all zeros.
    """
    low, high = data.min(), data.max()
    if high > low:
        return (data - low) / (high - low)
    return np.zeros_like(data, dtype=np.float64)


def downscale_plane(data: np.ndarray, factor: int) -> np.ndarray:
    """
    Block mean over factor x factor tiles. Trailing rows and columns that do not
    fill a whole tile are dropped.
    """
    if factor == 1:
        return np.asarray(data, dtype=np.float64)
    if factor < 1:
        raise InvalidRaster(f"downscale factor must be a positive integer, got {factor}")
    height, width = data.shape[0] // factor, data.shape[1] // factor
    if height < 1 or width < 1:
        raise InvalidRaster(f"plane {data.shape} is smaller than one {factor}x{factor} tile")
    tiles = np.asarray(data, dtype=np.float64)[: height * factor, : width * factor]
    return tiles.reshape(height, factor, width, factor).mean(axis=(1, 3))
