"""
Pydantic models for the JSON sidecars written next to depth and mask PNGs
"""

from typing import Literal, Optional

from pydantic import BaseModel, Field

INVERSE_ENCODING = "inverse_relative_u16"
METRIC_ENCODING = "metric_mm_u16"
MASK_ENCODING = "validity_mask_u1"


class DepthSidecar(BaseModel):
    encoding: Literal["inverse_relative_u16", "metric_mm_u16"]
    version: int = 1
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    normalized: bool = False
    sparse: bool = False
    # None encodes an unbounded cap (JSON has no infinity)
    cap_m: Optional[float] = None
    min: float
    max: float


class MaskSidecar(BaseModel):
    encoding: Literal["validity_mask_u1"] = MASK_ENCODING
    version: int = 1
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    threshold: float = Field(gt=0)
    valid_fraction: float = Field(ge=0, le=1)
