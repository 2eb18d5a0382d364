"""
Water-column parameters of the underwater image formation model and the results
of fitting it.
"""

import math
from dataclasses import dataclass

import numpy as np
from models.rasters import frozen_array
from pydantic import BaseModel, Field, field_validator
from utils.errors import InvalidRaster

Triple = tuple[float, float, float]


def _finite_nonnegative(values: Triple, name: str) -> Triple:
    if not all(math.isfinite(v) and v >= 0 for v in values):
        raise ValueError(f"{name} must be finite and >= 0, got {values}")
    return values


class WaterProperties(BaseModel):
    """
    Per-channel (R, G, B) coefficients.

    Attributes:
        beta_d (Triple): Attenuation of the direct signal, 1/m.
        beta_b (Triple): Backscatter coefficient, 1/m.
        b_inf (Triple): Veiling light in [0, 1].
    """

    beta_d: Triple
    beta_b: Triple
    b_inf: Triple

    model_config = {"frozen": True}

    @field_validator("beta_d", "beta_b")
    @classmethod
    def coefficients_valid(cls, value: Triple, info) -> Triple:
        return _finite_nonnegative(value, info.field_name)

    @field_validator("b_inf")
    @classmethod
    def veiling_light_valid(cls, value: Triple) -> Triple:
        _finite_nonnegative(value, "b_inf")
        if any(v > 1.0 for v in value):
            raise ValueError(f"b_inf must lie in [0, 1], got {value}")
        return value


class WaterPreset(WaterProperties):
    name: str
    category: str = ""
    description: str = ""
    authoritative: bool = False

    def properties(self) -> WaterProperties:
        return WaterProperties(beta_d=self.beta_d, beta_b=self.beta_b, b_inf=self.b_inf)


class ChannelFit(BaseModel):
    """
    Backscatter curve B(z) = b_inf (1 - exp(-beta_b z)) + j_prime exp(-beta_d_prime z)
    fitted for one channel.
    """

    b_inf: float = Field(ge=0, le=1)
    beta_b: float = Field(ge=0)
    j_prime: float = Field(ge=0, le=1)
    beta_d_prime: float = Field(ge=0)
    rms_residual: float = Field(ge=0)

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        return self.b_inf * (1.0 - np.exp(-self.beta_b * z)) + self.j_prime * np.exp(
            -self.beta_d_prime * z
        )


class BackscatterFit(BaseModel):
    channels: tuple[ChannelFit, ChannelFit, ChannelFit]
    rms_residual: float = Field(ge=0)
    n_points: int = Field(ge=0)

    model_config = {"frozen": True}

    def backscatter(self, z: np.ndarray) -> np.ndarray:
        """
        Predicted backscatter for a depth plane, shape (H, W, 3).
        """
        return np.stack([channel.evaluate(z) for channel in self.channels], axis=-1)

    @classmethod
    def from_water(cls, water: WaterProperties) -> "BackscatterFit":
        """
        Exact-parameter fit for a known water column (no residual term).
        """
        channels = tuple(
            ChannelFit(b_inf=b, beta_b=beta, j_prime=0.0, beta_d_prime=0.0, rms_residual=0.0)
            for b, beta in zip(water.b_inf, water.beta_b)
        )
        return cls(channels=channels, rms_residual=0.0, n_points=0)


@dataclass(frozen=True, eq=False)
class IlluminationMap:
    """
    Local illuminant estimate, shape (H, W, 3), values >= 0.
    """

    data: np.ndarray
    iterations: int = 0
    residual: float = 0.0

    def __post_init__(self):
        data = frozen_array(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise InvalidRaster(f"IlluminationMap needs shape (H, W, 3), got {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0:
            raise InvalidRaster("IlluminationMap values must be finite and >= 0")
        object.__setattr__(self, "data", data)
