"""
Pydantic models for the reports returned by pipeline stages.

Reports are plain data: stages build them, the command line prints them as JSON and
decides exit codes from their failure lists.
"""

from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator


class Violation(BaseModel):
    kind: Literal["duplicate_id", "dangling_path", "digest_mismatch"]
    record_id: str
    role: Optional[str] = None
    detail: str = ""


class ValidationReport(BaseModel):
    """
    Result of manifest_validate.

    Attributes:
        records (int): Number of complete records parsed.
        counts (dict[str, int]): Records per kind.
        violations (list[Violation]): Empty when the manifest is consistent.
        truncated_tail (bool): True when the file ends in an incomplete line left by an
            interrupted writer. Complete lines are unaffected.
    """

    records: int = 0
    counts: dict[str, int] = Field(default_factory=dict)
    violations: list[Violation] = Field(default_factory=list)
    truncated_tail: bool = False

    @property
    def ok(self) -> bool:
        return len(self.violations) == 0


class ItemFailure(BaseModel):
    item: str
    error: str


class StageReport(BaseModel):
    """
    Common counters for per-item stages. `success` includes items skipped because
    their records already existed.
    """

    total: int = 0
    success: int = 0
    skipped: int = 0
    failures: list[ItemFailure] = Field(default_factory=list)

    @property
    def failed(self) -> int:
        return len(self.failures)


class TripletBuildReport(StageReport):
    pass


class IngestReport(StageReport):
    mode: str = ""


class GenerationReport(StageReport):
    expected: int = 0


class FilterReport(StageReport):
    threshold: float = 0.15
    mean_valid_fraction: Optional[float] = None


class DepthHistogram(BaseModel):
    edges: list[float]
    counts: list[int]


class DatasetReport(StageReport):
    pairs: int = 0
    train: int = 0
    val: int = 0
    mean_valid_fraction: Optional[float] = None
    depth_histogram: Optional[DepthHistogram] = None


class ImageDepthStats(BaseModel):
    id: str
    min: float
    max: float
    mean: float


class FractionSummary(BaseModel):
    min: float
    max: float
    mean: float
    median: float


class StatsReport(BaseModel):
    pairs: int
    counts_per_split: dict[str, int]
    valid_fraction: Optional[FractionSummary] = None
    per_image_depth: list[ImageDepthStats] = Field(default_factory=list)
    prompt_counts: dict[str, int] = Field(default_factory=dict)
    prompt_frequency: dict[str, float] = Field(default_factory=dict)
    cap_respected: bool = True


class MetricsReport(BaseModel):
    """
    The nine depth metrics over one valid pixel set.

    Attributes:
        rmse (float): Meters.
        rmse_log (float): Natural log units.
        a_rel (float): Mean absolute relative error.
        s_rel (float): Mean squared relative error, meters.
        log10 (float): Mean absolute log10 error.
        si_log (float): Scale-invariant log error, 100 * sqrt(Var(ln p - ln g)).
        delta1 (float): Fraction with max(p/g, g/p) < 1.25.
        delta2 (float): Same with 1.25 ** 2.
        delta3 (float): Same with 1.25 ** 3.
        n_valid (int): Pixels (or images, for aggregates) the values are computed over.
    """

    rmse: float = Field(ge=0)
    rmse_log: float = Field(ge=0)
    a_rel: float = Field(ge=0)
    s_rel: float = Field(ge=0)
    log10: float = Field(ge=0)
    si_log: float = Field(ge=0)
    delta1: float = Field(ge=0, le=1)
    delta2: float = Field(ge=0, le=1)
    delta3: float = Field(ge=0, le=1)
    n_valid: int = Field(ge=1)

    @model_validator(mode="after")
    def deltas_nest(self) -> "MetricsReport":
        if not self.delta1 <= self.delta2 <= self.delta3:
            raise ValueError("delta thresholds must nest: delta1 <= delta2 <= delta3")
        return self


class ImageMetrics(BaseModel):
    id: str
    metrics: MetricsReport


class EvalReport(StageReport):
    aggregation: Literal["per_image", "pooled"] = "per_image"
    per_image: list[ImageMetrics] = Field(default_factory=list)
    aggregate: Optional[MetricsReport] = None
    excluded: list[str] = Field(default_factory=list)


class ResultRow(BaseModel):
    """
    One named row of a comparison table. Rows sharing a `group` are compared with
    each other when flagging best values.
    """

    name: str
    group: str = ""
    metrics: dict[str, float]
