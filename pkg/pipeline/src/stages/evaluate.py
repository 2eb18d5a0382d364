"""
Depth evaluation: the nine standard metrics, the model evaluation harness and the
comparison report (tables and bar plots).
"""

import json
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from backends.base import CheckpointRef, DepthModelBackend, invoke
from data import DATA_DIR
from matplotlib.figure import Figure
from models.manifest_record import ManifestRecord, RecordKind
from models.rasters import MetricDepthMap
from models.uncertainty import ValidityMask
from pydantic import ValidationError
from schemas.configs import EvalConfig, TrainConfig
from schemas.reports import EvalReport, ImageMetrics, MetricsReport, ResultRow
from stages.common import log_summary, map_items, record_failure
from stages.genpipe import record_checkpoint, train_backend
from utils.codecs import PathLike, atomic_output, decode_depth, decode_mask, load_array, load_image
from utils.errors import (
    EmptyResults,
    EmptyValidSet,
    InvalidConfig,
    IoFailure,
    ManifestInvalid,
    MissingFile,
    NonPositivePrediction,
    ParseFailure,
    ShapeMismatch,
)
from utils.manifest import records_of_kind, require_valid, resolve_path

logger = logging.getLogger("pipeline.stdout")

DepthInput = Union[MetricDepthMap, np.ndarray]
MaskInput = Union[ValidityMask, np.ndarray, None]

METRIC_COLUMNS = {
    "rmse": "RMSE↓",
    "rmse_log": "RMSE_log↓",
    "a_rel": "A.Rel↓",
    "s_rel": "S.Rel↓",
    "log10": "log10↓",
    "si_log": "SI_log↓",
    "delta1": "δ₁↑",
    "delta2": "δ₂↑",
    "delta3": "δ₃↑",
}
HIGHER_IS_BETTER = {"delta1", "delta2", "delta3"}
DELTA_BASE = 1.25

RESULT_ROW_FILE = "result_row.json"
PUBLISHED_RESULTS_FILE = DATA_DIR / "published_results.json"


def _plane(depth: DepthInput) -> np.ndarray:
    data = depth.data if isinstance(depth, MetricDepthMap) else depth
    return np.asarray(data, dtype=np.float64)


def _mask_plane(mask: MaskInput) -> Optional[np.ndarray]:
    if mask is None:
        return None
    data = mask.data if isinstance(mask, ValidityMask) else mask
    return np.asarray(data, dtype=bool)


def valid_pixels(
    pred: DepthInput, gt: DepthInput, mask: MaskInput, cfg: EvalConfig
) -> tuple[np.ndarray, np.ndarray]:
    """
    Prediction and ground truth values over the valid set, median scaling applied.

    The valid set is every pixel with finite ground truth >= gt_min_m, <= gt_max_m
    when set, and a true mask value when a mask is given.

    Raises:
        ShapeMismatch: If the inputs do not share dimensions.
        EmptyValidSet: If no pixel is valid.
        NonPositivePrediction: If a prediction on the valid set is not finite and > 0.
    """
    p, g = _plane(pred), _plane(gt)
    keep = _mask_plane(mask)
    if p.shape != g.shape or (keep is not None and keep.shape != g.shape):
        raise ShapeMismatch(
            f"prediction {p.shape}, ground truth {g.shape}"
            + (f", mask {keep.shape}" if keep is not None else "")
        )
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(g) & (g >= cfg.gt_min_m)
        if cfg.gt_max_m is not None:
            valid &= g <= cfg.gt_max_m
    if keep is not None:
        valid &= keep
    if not valid.any():
        raise EmptyValidSet("no valid ground truth pixels")
    p, g = p[valid], g[valid]
    if not np.all(np.isfinite(p) & (p > 0)):
        raise NonPositivePrediction("prediction must be finite and > 0 on the valid set")
    if cfg.median_scaling:
        p = p * (np.median(g) / np.median(p))
    return p, g


def metrics_from_values(p: np.ndarray, g: np.ndarray, cfg: EvalConfig) -> MetricsReport:
    """
    The nine metrics over paired positive values.
    """
    diff = p - g
    log_error = np.log(p) - np.log(g)
    ratio = np.maximum(p / g, g / p)
    ddof = 1 if cfg.si_variance == "sample" and p.size > 1 else 0
    return MetricsReport(
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean(log_error**2))),
        a_rel=float(np.mean(np.abs(diff) / g)),
        s_rel=float(np.mean(diff**2 / g)),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        si_log=float(100.0 * np.sqrt(np.var(log_error, ddof=ddof))),
        delta1=float(np.mean(ratio < DELTA_BASE)),
        delta2=float(np.mean(ratio < DELTA_BASE**2)),
        delta3=float(np.mean(ratio < DELTA_BASE**3)),
        n_valid=int(p.size),
    )


def compute_metrics(
    pred: DepthInput, gt: DepthInput, mask: MaskInput = None, cfg: Optional[EvalConfig] = None
) -> MetricsReport:
    """
    RMSE, RMSE_log, A.Rel, S.Rel, log10, SI_log and the three inlier ratios of a
    prediction against ground truth.

    Args:
        pred (DepthInput): Predicted metric depth.
        gt (DepthInput): Ground truth; non-finite entries are holes.
        mask (MaskInput): Optional keep-mask.
        cfg (Optional[EvalConfig]): Valid-set policy and options.

    Returns:
        MetricsReport: Metrics over exactly the valid set.

    Examples:
        pred [[2]] vs gt [[1]] gives rmse 1, rmse_log ln 2, a_rel 1, deltas 0.
    """
    cfg = cfg or EvalConfig()
    p, g = valid_pixels(pred, gt, mask, cfg)
    return metrics_from_values(p, g, cfg)


def mean_metrics(reports: list[MetricsReport]) -> MetricsReport:
    """
    Per-image averaging; n_valid of the result counts images.

    Raises:
        EmptyValidSet: If there is nothing to average.
    """
    if not reports:
        raise EmptyValidSet("no image had a valid pixel")
    frame = pd.DataFrame([report.model_dump() for report in reports])
    values = {column: float(frame[column].mean()) for column in METRIC_COLUMNS}
    return MetricsReport(**values, n_valid=len(reports))


def _load_metric(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".npy":
        return np.asarray(load_array(path), dtype=np.float64)
    depth = decode_depth(path)
    if not isinstance(depth, MetricDepthMap):
        raise InvalidConfig(f"{path.name} does not hold metric depth")
    return np.asarray(depth.data, dtype=np.float64)


def _load_mask(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".npy":
        return np.asarray(load_array(path)).astype(bool)
    return decode_mask(path)[0]


def _finish(report: EvalReport, scored: list[tuple[str, MetricsReport, tuple]], cfg: EvalConfig):
    report.per_image = [ImageMetrics(id=item, metrics=metrics) for item, metrics, _ in scored]
    if not scored:
        return
    if cfg.aggregation == "pooled":
        p = np.concatenate([values[0] for _, _, values in scored])
        g = np.concatenate([values[1] for _, _, values in scored])
        report.aggregate = metrics_from_values(p, g, cfg)
    else:
        report.aggregate = mean_metrics([metrics for _, metrics, _ in scored])


def _collect(report: EvalReport, outcomes, cfg: EvalConfig, label) -> EvalReport:
    scored = []
    for item, result, error in outcomes:
        item_id = label(item)
        if isinstance(error, EmptyValidSet):
            logger.warning(f"{item_id} has no valid pixels, excluded from the aggregate")
            report.excluded.append(item_id)
            report.success += 1
        elif error is not None:
            record_failure(report, item_id, error)
        else:
            metrics, values = result
            scored.append((item_id, metrics, values))
            report.success += 1
    _finish(report, scored, cfg)
    return report


def evaluate_model(
    backend: DepthModelBackend,
    eval_manifest: PathLike,
    cfg: Optional[EvalConfig] = None,
    checkpoint: Optional[CheckpointRef] = None,
    jobs: int = 1,
) -> EvalReport:
    """
    Runs a depth model over every record with `image` and `depth` paths and scores
    it against the recorded metric depth, using the record's `mask` when present.

    Images with an empty valid set are listed in `excluded`; backend failures are
    reported per item. Raises ManifestInvalid if the manifest fails validation.
    """
    cfg = cfg or EvalConfig()
    records = [
        record
        for record in require_valid(eval_manifest)
        if "image" in record.paths and "depth" in record.paths
    ]
    report = EvalReport(total=len(records), aggregation=cfg.aggregation)
    logger.info(
        f"Evaluating {backend.id} on {len(records)} images "
        f"({cfg.aggregation}, median scaling {cfg.median_scaling})"
    )

    def process(record: ManifestRecord):
        image = load_image(resolve_path(eval_manifest, record, "image"))
        gt = decode_depth(resolve_path(eval_manifest, record, "depth"))
        if not isinstance(gt, MetricDepthMap):
            raise ManifestInvalid(f"depth of {record.id} is not metric")
        mask = None
        if "mask" in record.paths:
            mask = decode_mask(resolve_path(eval_manifest, record, "mask"))[0]
        pred = invoke(backend, backend.predict, image, checkpoint, item_id=record.id)
        values = valid_pixels(pred, gt, mask, cfg)
        return metrics_from_values(*values, cfg), values

    outcomes = map_items(process, records, jobs)
    _collect(report, outcomes, cfg, lambda record: record.id)
    log_summary("eval", report)
    return report


def evaluate_predictions(
    pred_dir: PathLike,
    gt_dir: PathLike,
    mask_dir: Optional[PathLike] = None,
    cfg: Optional[EvalConfig] = None,
    jobs: int = 1,
) -> EvalReport:
    """
    Scores precomputed predictions. Files are matched by stem; predictions and ground
    truth are `.npy` meters or encoded metric PNG, masks `.npy` or encoded mask PNG.
    """
    cfg = cfg or EvalConfig()

    def by_stem(directory: PathLike) -> dict[str, Path]:
        return {
            path.stem: path
            for path in sorted(Path(directory).iterdir())
            if path.is_file() and path.suffix.lower() in (".npy", ".png")
        }

    predictions, truths = by_stem(pred_dir), by_stem(gt_dir)
    masks = by_stem(mask_dir) if mask_dir is not None else {}
    unmatched = sorted(set(truths) - set(predictions))
    if unmatched:
        logger.warning(f"{len(unmatched)} ground truth files have no prediction")
    stems = sorted(predictions)
    report = EvalReport(total=len(stems), aggregation=cfg.aggregation)
    logger.info(f"Evaluating {len(stems)} predictions from {pred_dir} against {gt_dir}")

    def process(stem: str):
        if stem not in truths:
            raise MissingFile(f"no ground truth for {stem}")
        mask = None
        if mask_dir is not None:
            if stem not in masks:
                raise MissingFile(f"no mask for {stem}")
            mask = _load_mask(masks[stem])
        pred, gt = _load_metric(predictions[stem]), _load_metric(truths[stem])
        values = valid_pixels(pred, gt, mask, cfg)
        return metrics_from_values(*values, cfg), values

    _collect(report, map_items(process, stems, jobs), cfg, lambda stem: stem)
    log_summary("eval", report)
    return report


def train_depth_model(
    dataset_manifest: PathLike,
    cfg: TrainConfig,
    backend: DepthModelBackend,
    out_manifest: Optional[PathLike] = None,
) -> CheckpointRef:
    """
    Trains a depth model on the train split of an assembled dataset.

    Raises:
        ManifestInvalid: If the manifest fails validation or holds no dataset pairs.
        BackendFailure: If training fails.
    """
    pairs = records_of_kind(require_valid(dataset_manifest), RecordKind.DATASET_PAIR)
    if not pairs:
        raise ManifestInvalid(f"no dataset pairs in {dataset_manifest}")
    logger.info(f"Training {backend.id} on {len(pairs)} pairs")
    ref = train_backend(backend, dataset_manifest, cfg)
    if out_manifest is not None:
        record_checkpoint(out_manifest, ref, cfg, dataset_manifest, len(pairs))
    return ref


def result_row(report: EvalReport, name: str, group: str = "") -> ResultRow:
    if report.aggregate is None:
        raise EmptyResults(f"evaluation {name} has no aggregate")
    metrics = report.aggregate.model_dump()
    return ResultRow(name=name, group=group, metrics={key: metrics[key] for key in METRIC_COLUMNS})


def write_eval_results(
    report: EvalReport, out_dir: PathLike, name: str, group: str = ""
) -> list[Path]:
    """
    Writes the full report as JSON, per-image metrics as CSV and, when there is an
    aggregate, the result row that `report` reads back.
    """
    target = Path(out_dir)
    written = [target / "eval_report.json", target / "per_image.csv"]
    with atomic_output(written[0], "w") as handle:
        handle.write(report.model_dump_json(indent=2))
    frame = pd.DataFrame(
        [{"id": entry.id, **entry.metrics.model_dump()} for entry in report.per_image],
        columns=["id", *METRIC_COLUMNS, "n_valid"],
    )
    with atomic_output(written[1], "w") as handle:
        frame.to_csv(handle, index=False)
    if report.aggregate is not None:
        written.append(target / RESULT_ROW_FILE)
        with atomic_output(written[-1], "w") as handle:
            handle.write(result_row(report, name, group).model_dump_json(indent=2))
    return written


def load_result_rows(results_dir: PathLike) -> list[ResultRow]:
    """
    Every result row written under `results_dir`, ordered by path.

    Raises:
        ParseFailure: If a result row file is not a valid row.
        IoFailure: If a result row file cannot be read.
    """
    rows = []
    for path in sorted(Path(results_dir).rglob(RESULT_ROW_FILE)):
        try:
            rows.append(ResultRow.model_validate_json(path.read_text(encoding="utf-8")))
        except ValidationError as e:
            raise ParseFailure(f"{path} is not a valid result row: {e.error_count()} errors") from e
        except (OSError, UnicodeDecodeError) as e:
            raise IoFailure(f"cannot read {path}: {e}") from e
    return rows


def published_tables() -> list[str]:
    with open(PUBLISHED_RESULTS_FILE, encoding="utf-8") as handle:
        return list(json.load(handle)["tables"])


def published_results(table: str = "seathru") -> list[ResultRow]:
    """
    Stored values of a published comparison table.

    Tables: seathru, squid, seathru_supplementary, squid_supplementary, gan_seathru,
    gan_squid.

    Raises:
        InvalidConfig: If the table is unknown.
    """
    with open(PUBLISHED_RESULTS_FILE, encoding="utf-8") as handle:
        tables = json.load(handle)["tables"]
    if table not in tables:
        raise InvalidConfig(f"unknown results table '{table}', choose from {sorted(tables)}")
    return [ResultRow.model_validate(row) for row in tables[table]["rows"]]


def best_flags(rows: list[ResultRow]) -> list[set[str]]:
    """
    Per row, the metrics in which it is best within its group. Lower is better for
    errors, higher for the inlier ratios; ties are all flagged.
    """
    flags: list[set[str]] = [set() for _ in rows]
    groups: dict[str, list[int]] = {}
    for index, row in enumerate(rows):
        groups.setdefault(row.group, []).append(index)
    for members in groups.values():
        for metric in METRIC_COLUMNS:
            present = [i for i in members if metric in rows[i].metrics]
            if not present:
                continue
            values = [rows[i].metrics[metric] for i in present]
            best = max(values) if metric in HIGHER_IS_BETTER else min(values)
            for i, value in zip(present, values):
                if value == best:
                    flags[i].add(metric)
    return flags


def _plot_metric(rows: list[ResultRow], flags: list[set[str]], metric: str, path: Path):
    labels = [f"{row.group}\n{row.name}" if row.group else row.name for row in rows]
    values = [row.metrics.get(metric, np.nan) for row in rows]
    colors = ["tab:blue" if metric in flag else "tab:gray" for flag in flags]
    fig = Figure(figsize=(max(6, 1.2 * len(rows)), 4))
    ax = fig.subplots(1, 1)
    ax.bar(range(len(rows)), values, color=colors)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    direction = "higher" if metric in HIGHER_IS_BETTER else "lower"
    ax.set_title(f"{METRIC_COLUMNS[metric]} ({direction} is better)")
    fig.tight_layout()
    with atomic_output(path) as handle:
        fig.savefig(handle, format="png", metadata={"Software": None})


def render_report(rows: list[ResultRow], out_dir: PathLike) -> list[Path]:
    """
    Writes results.csv (values exactly as given, plus the flagged columns), a
    plain-text table with best values starred, and one bar plot per metric.

    Raises:
        EmptyResults: If there are no rows.
    """
    if not rows:
        raise EmptyResults("nothing to report")
    target = Path(out_dir)
    flags = best_flags(rows)
    table = pd.DataFrame(
        [
            {
                "name": row.name,
                "group": row.group,
                **{label: row.metrics.get(key, np.nan) for key, label in METRIC_COLUMNS.items()},
                "best": " ".join(METRIC_COLUMNS[key] for key in METRIC_COLUMNS if key in flag),
            }
            for row, flag in zip(rows, flags)
        ]
    )
    written = [target / "results.csv", target / "results.txt"]
    with atomic_output(written[0], "w") as handle:
        table.to_csv(handle, index=False)

    text = table.drop(columns=["best"])
    for key, label in METRIC_COLUMNS.items():
        text[label] = [
            f"{row.metrics[key]:.3f}{'*' if key in flag else ''}" if key in row.metrics else "-"
            for row, flag in zip(rows, flags)
        ]
    with atomic_output(written[1], "w") as handle:
        handle.write(text.to_string(index=False) + "\n")

    for key in METRIC_COLUMNS:
        path = target / f"plot_{key}.png"
        _plot_metric(rows, flags, key, path)
        written.append(path)
    logger.info(f"Report of {len(rows)} rows written to {target}")
    return written
