"""
Stage configurations and the pipeline configuration file schema
"""

import enum
import hashlib
import json
from typing import Any, Literal, Optional

from pydantic import BaseModel, Field, field_validator
from utils.errors import InvalidConfig

DEFAULT_PROMPTS = ["an underwater view of Atlantis", "a corner of lost Atlantis"]


def config_hash(model: BaseModel) -> str:
    """
    sha256 of a model's canonical JSON.
    """
    canonical = json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class GenerationConfig(BaseModel):
    guidance_scale: float = Field(default=5.0, gt=0)
    num_steps: int = Field(default=20, ge=1)
    samples_per_condition: int = Field(default=4, ge=1)
    base_seed: int = 0
    prompts: list[str] = Field(default_factory=lambda: list(DEFAULT_PROMPTS), min_length=1)

    model_config = {"frozen": True}

    @field_validator("prompts")
    @classmethod
    def prompts_not_blank(cls, value: list[str]) -> list[str]:
        if any(len(prompt.strip()) < 1 for prompt in value):
            raise ValueError("prompts must be nonempty strings")
        return value


class TrainConfig(BaseModel):
    """
    Training request passed to a backend. Hyperparameters are opaque to the pipeline;
    only the conditioning branch is ever trainable.
    """

    backend_id: str
    hyperparameters: dict[str, Any] = Field(default_factory=dict)
    trainable_scope: Literal["conditioning_branch_only"] = "conditioning_branch_only"

    model_config = {"frozen": True}

    def config_hash(self) -> str:
        return config_hash(self)


class DepthMapping(str, enum.Enum):
    INVERSE_LINEAR = "inverse_linear"
    LINEAR = "linear"


class ConversionConfig(BaseModel):
    d_min_m: float = 0.3
    d_max_m: float = 20.0
    mapping: DepthMapping = DepthMapping.INVERSE_LINEAR

    model_config = {"frozen": True}

    def check(self) -> "ConversionConfig":
        """
        Raises:
            InvalidConfig: Unless 0 < d_min_m < d_max_m.
        """
        if not 0 < self.d_min_m < self.d_max_m:
            raise InvalidConfig(
                f"need 0 < d_min_m < d_max_m, got d_min_m={self.d_min_m}, d_max_m={self.d_max_m}"
            )
        return self


class EvalConfig(BaseModel):
    gt_min_m: float = Field(default=1e-3, gt=0)
    gt_max_m: Optional[float] = Field(default=None, gt=0)
    median_scaling: bool = False
    aggregation: Literal["per_image", "pooled"] = "per_image"
    si_variance: Literal["population", "sample"] = "population"

    model_config = {"frozen": True}


class UncertaintyConfig(BaseModel):
    threshold: float = Field(default=0.15, gt=0)
    variance: Literal["population", "sample"] = "population"
    normalize: bool = True

    model_config = {"frozen": True}


class DatasetConfig(BaseModel):
    split_ratio: float = Field(default=0.9, ge=0, le=1)

    model_config = {"frozen": True}


class BackendSpec(BaseModel):
    """
    Registry entry: adapter name (or `python:<module>:<Class>`) and its parameters.
    """

    adapter: str = Field(min_length=1)
    params: dict[str, Any] = Field(default_factory=dict)
    reentrant: Optional[bool] = None


class PathsConfig(BaseModel):
    work_dir: str = "."


class PipelineConfig(BaseModel):
    backends: dict[str, BackendSpec] = Field(default_factory=dict)
    generation: GenerationConfig = Field(default_factory=GenerationConfig)
    conversion: ConversionConfig = Field(default_factory=ConversionConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    uncertainty: UncertaintyConfig = Field(default_factory=UncertaintyConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    jobs: int = Field(default=1, ge=1)

    def config_hash(self) -> str:
        return config_hash(self)
