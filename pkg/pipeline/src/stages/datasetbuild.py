"""
Dataset assembly: capped metric depth from the conditioning depth of every
generated image, a validity mask from its depth uncertainty, and a deterministic
train/val split.
"""

import hashlib
import logging
import math
from collections import Counter
from typing import Optional

import numpy as np
import pandas as pd
from backends.base import DepthEstimatorBackend
from models.manifest_record import ManifestRecord, RecordKind
from models.rasters import InverseRelativeDepthMap, MetricDepthMap, minmax_normalize
from models.records import DatasetPair, Split
from models.uncertainty import ValidityMask
from schemas.configs import ConversionConfig, DepthMapping
from schemas.reports import (
    DatasetReport,
    DepthHistogram,
    FractionSummary,
    ImageDepthStats,
    StatsReport,
)
from stages.common import OP_VERSION, append_new, log_summary, map_items, record_failure
from stages.uncertainty import (
    Variance,
    depth_uncertainty,
    load_uncertainty,
    masks_by_generated,
    validity_mask,
)
from utils.codecs import PathLike, decode_depth, encode_depth, encode_mask, load_image
from utils.errors import (
    InvalidRaster,
    ManifestInvalid,
    MissingConditioningDepth,
    MissingUncertainty,
    ShapeMismatch,
)
from utils.manifest import (
    artifact_dir,
    content_id,
    make_record,
    manifest_ids,
    read_manifest,
    records_of_kind,
    require_valid,
    resolve_path,
)

logger = logging.getLogger("pipeline.stdout")

HISTOGRAM_BINS = 10


def inverse_to_metric(norm_inv: InverseRelativeDepthMap, cfg: ConversionConfig) -> MetricDepthMap:
    """
    Converts normalized inverse depth n in [0, 1] to meters in [d_min, d_max].

    inverse_linear interpolates linearly in inverse depth:
    q = n (1/d_min - 1/d_max) + 1/d_max, d = 1/q. linear interpolates in depth:
    d = d_max - n (d_max - d_min). Both map n = 1 to d_min and n = 0 to d_max exactly
    and are strictly decreasing in n.

    Raises:
        InvalidConfig: Unless 0 < d_min_m < d_max_m.
        InvalidRaster: If the map is not normalized.
    """
    cfg.check()
    if not norm_inv.normalized:
        raise InvalidRaster("inverse_to_metric needs a normalized inverse depth map")
    n = norm_inv.data
    d_min, d_max = cfg.d_min_m, cfg.d_max_m
    if cfg.mapping == DepthMapping.LINEAR:
        depth = d_max - n * (d_max - d_min)
    else:
        depth = 1.0 / (n * (1.0 / d_min - 1.0 / d_max) + 1.0 / d_max)
    depth = np.where(n == 1.0, d_min, np.where(n == 0.0, d_max, depth))
    return MetricDepthMap(np.clip(depth, d_min, d_max), cap_m=d_max)


def metric_to_normalized_inverse(depth: MetricDepthMap) -> InverseRelativeDepthMap:
    """
    Reciprocal then min-max over the valid pixels. Holes become 0 (farthest).
    """
    inverse = np.zeros(depth.shape)
    inverse[depth.valid] = 1.0 / depth.data[depth.valid]
    if depth.valid.any():
        inverse[depth.valid] = minmax_normalize(inverse[depth.valid])
    return InverseRelativeDepthMap(inverse, normalized=True)


def assign_splits(record_ids: list[str], split_ratio: float) -> dict[str, Split]:
    """
    Orders ids by the sha256 of the id and sends the first round(ratio * N) to train.
    """
    ordered = sorted(record_ids, key=lambda rid: hashlib.sha256(rid.encode("utf-8")).hexdigest())
    n_train = int(math.floor(split_ratio * len(ordered) + 0.5))
    return {rid: Split.TRAIN if index < n_train else Split.VAL for index, rid in enumerate(ordered)}


def _depth_record(gen_manifest: PathLike, record: ManifestRecord):
    if "depth" not in record.paths:
        raise MissingConditioningDepth(f"generated image {record.id} has no conditioning depth")
    return resolve_path(gen_manifest, record, "depth")


def assemble_dataset(
    gen_manifest: PathLike,
    uncertainty_manifest: Optional[PathLike],
    cfg: ConversionConfig,
    threshold: float,
    split_ratio: float,
    out_manifest: PathLike,
    estimator: Optional[DepthEstimatorBackend] = None,
    variance: Variance = "population",
    normalize: bool = True,
    jobs: int = 1,
) -> DatasetReport:
    """
    Builds one dataset pair per generated image.

    Masks come from the uncertainty manifest written by the filter stage when given
    (re-thresholded if it used another threshold); generated images it does not
    cover are scored with `estimator`.

    Args:
        gen_manifest (PathLike): Manifest of generated images.
        uncertainty_manifest (Optional[PathLike]): Output of filter_generated.
        cfg (ConversionConfig): Inverse to metric conversion.
        threshold (float): Uncertainty threshold for the masks.
        split_ratio (float): Share of pairs sent to the train split.
        out_manifest (PathLike): Dataset manifest to extend.
        estimator (Optional[DepthEstimatorBackend]): Used when no stored uncertainty exists.
        variance (Variance): DU convention when scoring with the estimator.
        normalize (bool): DU normalization when scoring with the estimator.
        jobs (int): Worker threads.

    Raises:
        MissingConditioningDepth: If a generated image has no conditioning depth.
        MissingUncertainty: If a generated image has no stored uncertainty and no
            estimator is given.
        ManifestInvalid: If an input manifest fails validation.
    """
    cfg.check()
    generated = records_of_kind(require_valid(gen_manifest), RecordKind.GENERATED_IMAGE)
    for record in generated:
        _depth_record(gen_manifest, record)
    stored = {}
    if uncertainty_manifest is not None:
        require_valid(uncertainty_manifest)
        stored = masks_by_generated(uncertainty_manifest)
    missing = [record.id for record in generated if record.id not in stored]
    if missing and estimator is None:
        raise MissingUncertainty(
            f"{len(missing)} generated image(s) have no uncertainty and no estimator was given"
        )
    conversion = cfg.model_dump(mode="json")
    mask_source = {
        record.id: (
            stored[record.id][0].id
            if record.id in stored
            else f"{estimator.id}|{variance}|{normalize}"
        )
        for record in generated
    }
    pair_ids = {
        record.id: content_id(
            "pair", record.id, conversion, threshold, mask_source[record.id], OP_VERSION
        )
        for record in generated
    }
    splits = assign_splits(list(pair_ids.values()), split_ratio)
    existing = manifest_ids(out_manifest)
    report = DatasetReport(total=len(generated))
    logger.info(
        f"Assembling {len(generated)} pairs (threshold {threshold}, "
        f"{cfg.mapping.value} {cfg.d_min_m}-{cfg.d_max_m} m, split {split_ratio})"
    )
    depth_dir = artifact_dir(out_manifest, RecordKind.DEPTH)
    mask_dir = artifact_dir(out_manifest, RecordKind.MASK)

    def process(record: ManifestRecord) -> Optional[ManifestRecord]:
        pair_id = pair_ids[record.id]
        if pair_id in existing:
            return None
        image_path = resolve_path(gen_manifest, record, "image")
        image = load_image(image_path)
        conditioning = decode_depth(_depth_record(gen_manifest, record))
        if not isinstance(conditioning, InverseRelativeDepthMap):
            raise ManifestInvalid(f"conditioning depth of {record.id} is not inverse depth")
        metric = inverse_to_metric(conditioning, cfg)
        if record.id in stored:
            du = load_uncertainty(uncertainty_manifest, stored[record.id][0])
        else:
            du = depth_uncertainty(image, estimator, variance, normalize, item_id=record.id)
        mask: ValidityMask = validity_mask(du, threshold)
        if not image.shape == metric.shape == mask.shape:
            raise ShapeMismatch(
                f"{record.id}: image {image.shape}, depth {metric.shape}, mask {mask.shape}"
            )
        depth_path = encode_depth(metric, depth_dir / f"{pair_id}.png")
        mask_path = encode_mask(mask.data, threshold, mask_dir / f"{pair_id}.png")
        pair = DatasetPair(
            image_ref=record.id,
            depth_ref=pair_id,
            mask_ref=pair_id,
            source_depth_ref=record.params.get("depth_ref", ""),
            prompt=record.params.get("prompt", ""),
            seed=int(record.params.get("seed", 0)),
            split=splits[pair_id],
            threshold=threshold,
            valid_fraction=mask.valid_fraction,
            cap_m=metric.cap_m,
        )
        return make_record(
            out_manifest,
            pair_id,
            RecordKind.DATASET_PAIR,
            {"image": image_path, "depth": depth_path, "mask": mask_path},
            {**pair.model_dump(mode="json"), "conversion": conversion},
        )

    for record, pair_record, error in map_items(process, generated, jobs):
        if error is not None:
            record_failure(report, record.id, error)
            continue
        if pair_record is None:
            report.skipped += 1
        else:
            append_new(out_manifest, [pair_record], existing)
        report.success += 1

    wanted = {pair_ids[record.id] for record in generated}
    written = read_manifest(out_manifest, missing_ok=True)
    pairs = [r for r in records_of_kind(written, RecordKind.DATASET_PAIR) if r.id in wanted]
    _summarize_pairs(out_manifest, pairs, cfg, report)
    log_summary("build", report)
    return report


def _summarize_pairs(
    manifest: PathLike, pairs: list[ManifestRecord], cfg: ConversionConfig, report: DatasetReport
):
    report.pairs = len(pairs)
    splits = Counter(pair.params["split"] for pair in pairs)
    report.train = splits.get(Split.TRAIN.value, 0)
    report.val = splits.get(Split.VAL.value, 0)
    if not pairs:
        return
    report.mean_valid_fraction = float(np.mean([pair.params["valid_fraction"] for pair in pairs]))
    edges = np.linspace(cfg.d_min_m, cfg.d_max_m, HISTOGRAM_BINS + 1)
    counts = np.zeros(HISTOGRAM_BINS, dtype=np.int64)
    for pair in pairs:
        depth = decode_depth(resolve_path(manifest, pair, "depth"))
        counts += np.histogram(depth.data[depth.valid], bins=edges)[0]
    report.depth_histogram = DepthHistogram(edges=edges.tolist(), counts=counts.tolist())


def dataset_stats(dataset_manifest: PathLike) -> StatsReport:
    """
    Split counts, valid-fraction distribution, per-image depth range and prompt
    frequencies of an assembled dataset.

    Raises:
        ManifestInvalid: If the manifest fails validation.
    """
    pairs = records_of_kind(require_valid(dataset_manifest), RecordKind.DATASET_PAIR)
    counts = Counter(pair.params.get("split", "unknown") for pair in pairs)
    per_image = []
    cap_respected = True
    for pair in pairs:
        depth = decode_depth(resolve_path(dataset_manifest, pair, "depth"))
        values = depth.data[depth.valid]
        cap = pair.params.get("cap_m", depth.cap_m)
        cap_respected = cap_respected and bool(np.all((values > 0) & (values <= cap)))
        per_image.append(
            ImageDepthStats(
                id=pair.id,
                min=float(values.min()) if values.size else 0.0,
                max=float(values.max()) if values.size else 0.0,
                mean=float(values.mean()) if values.size else 0.0,
            )
        )
    fractions = np.array([pair.params.get("valid_fraction", 0.0) for pair in pairs])
    prompts = Counter(pair.params.get("prompt", "") for pair in pairs)
    return StatsReport(
        pairs=len(pairs),
        counts_per_split={split.value: counts.get(split.value, 0) for split in Split},
        valid_fraction=(
            FractionSummary(
                min=float(fractions.min()),
                max=float(fractions.max()),
                mean=float(fractions.mean()),
                median=float(np.median(fractions)),
            )
            if fractions.size
            else None
        ),
        per_image_depth=per_image,
        prompt_counts=dict(sorted(prompts.items())),
        prompt_frequency={
            prompt: count / len(pairs) for prompt, count in sorted(prompts.items())
        },
        cap_respected=cap_respected,
    )


def stats_table(stats: StatsReport) -> str:
    """
    Human readable rendering of a StatsReport.
    """
    summary = pd.DataFrame(
        [{"split": split, "pairs": count} for split, count in stats.counts_per_split.items()]
    )
    prompts = pd.DataFrame(
        [
            {"prompt": prompt, "count": stats.prompt_counts[prompt], "share": share}
            for prompt, share in stats.prompt_frequency.items()
        ],
        columns=["prompt", "count", "share"],
    )
    depths = pd.DataFrame(
        [entry.model_dump() for entry in stats.per_image_depth],
        columns=["id", "min", "max", "mean"],
    )
    parts = [
        f"pairs: {stats.pairs} (cap respected: {stats.cap_respected})",
        summary.to_string(index=False),
        prompts.to_string(index=False, float_format=lambda v: f"{v:.3f}"),
    ]
    if stats.valid_fraction is not None:
        fraction = stats.valid_fraction
        parts.append(
            f"valid fraction: min {fraction.min:.3f} median {fraction.median:.3f} "
            f"mean {fraction.mean:.3f} max {fraction.max:.3f}"
        )
    if not depths.empty:
        parts.append(depths.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    return "\n\n".join(parts)
