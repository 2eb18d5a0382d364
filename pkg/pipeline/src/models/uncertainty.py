"""
Depth uncertainty rasters and the keep-mask derived from them.
"""

from dataclasses import dataclass, field

import numpy as np
from models.rasters import check_plane, frozen_array
from utils.errors import InvalidRaster, NonPositiveThreshold

DEFAULT_DU_THRESHOLD = 0.15


@dataclass(frozen=True, eq=False)
class UncertaintyMap:
    """
    Per-pixel flip-consistency variance, unitless.
    """

    data: np.ndarray

    def __post_init__(self):
        data = frozen_array(self.data)
        check_plane(data, "UncertaintyMap")
        if not np.all(np.isfinite(data)) or data.min() < 0.0:
            raise InvalidRaster("UncertaintyMap values must be finite and >= 0")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.data.shape[0]), int(self.data.shape[1])

    def hflip(self) -> "UncertaintyMap":
        return UncertaintyMap(self.data[:, ::-1])


@dataclass(frozen=True, eq=False)
class ValidityMask:
    """
    Boolean keep-mask: True where the pixel's uncertainty is below `threshold`.
    """

    data: np.ndarray
    threshold: float = DEFAULT_DU_THRESHOLD
    valid_fraction: float = field(init=False)

    def __post_init__(self):
        if not self.threshold > 0:
            raise NonPositiveThreshold(f"threshold must be > 0, got {self.threshold}")
        data = np.array(self.data, dtype=bool, copy=True)
        check_plane(data, "ValidityMask")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid_fraction", float(data.mean()))

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.data.shape[0]), int(self.data.shape[1])

    @classmethod
    def from_uncertainty(
        cls, du: UncertaintyMap, threshold: float = DEFAULT_DU_THRESHOLD
    ) -> "ValidityMask":
        if not threshold > 0:
            raise NonPositiveThreshold(f"threshold must be > 0, got {threshold}")
        return cls(du.data < threshold, threshold=threshold)
