"""
Pydantic model for a manifest ledger record
"""

import enum
from datetime import datetime
from typing import Any

from pydantic import BaseModel, Field


class RecordKind(str, enum.Enum):
    """
    Artifact kinds tracked by the manifest.
    """

    SOURCE_IMAGE = "source_image"
    DEPTH = "depth"
    CAPTION = "caption"
    TRIPLET = "triplet"
    GENERATED_IMAGE = "generated_image"
    UNCERTAINTY = "uncertainty"
    MASK = "mask"
    DATASET_PAIR = "dataset_pair"
    EVAL_RESULT = "eval_result"
    CHECKPOINT = "checkpoint"


class ManifestRecord(BaseModel):
    """
    One line of a JSON Lines manifest.

    Attributes:
        id (str): Content-derived identifier, unique within a manifest.
        kind (RecordKind): Artifact kind.
        paths (dict[str, str]): Role to file path, relative to the manifest's directory.
        sha256 (dict[str, str]): Role to hex digest of the referenced file.
        params (dict[str, Any]): Provenance: seeds, prompts, backend ids, config hashes.
        created_at (datetime): Time the record was written.
    """

    id: str = Field(min_length=1)
    kind: RecordKind
    paths: dict[str, str] = Field(default_factory=dict)
    sha256: dict[str, str] = Field(default_factory=dict)
    params: dict[str, Any] = Field(default_factory=dict)
    created_at: datetime

    model_config = {"frozen": True}
