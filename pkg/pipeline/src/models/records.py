"""
Typed views of the params carried by triplet and dataset pair manifest records.
"""

import enum

from pydantic import BaseModel, Field


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"


class Triplet(BaseModel):
    """
    {underwater image, depth, caption} training unit. The refs are manifest ids
    that resolve in the same manifest.
    """

    image_ref: str = Field(min_length=1)
    depth_ref: str = Field(min_length=1)
    caption_ref: str = Field(min_length=1)
    estimator_id: str
    captioner_id: str

    model_config = {"frozen": True}


class DatasetPair(BaseModel):
    """
    One training pair of the assembled dataset.

    Attributes:
        image_ref (str): Generated image record id.
        depth_ref (str): Metric depth artifact id.
        mask_ref (str): Validity mask artifact id.
        source_depth_ref (str): Conditioning inverse depth record id.
        prompt (str): Prompt the image was generated from.
        seed (int): Sampling seed.
        split (Split): train or val.
        threshold (float): Uncertainty threshold the mask was built with.
        valid_fraction (float): Share of pixels kept by the mask.
    """

    image_ref: str
    depth_ref: str
    mask_ref: str
    source_depth_ref: str
    prompt: str
    seed: int
    split: Split
    threshold: float = Field(gt=0)
    valid_fraction: float = Field(ge=0, le=1)
    cap_m: float = Field(gt=0)

    model_config = {"frozen": True}
