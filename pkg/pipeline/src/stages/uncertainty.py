"""
Depth Uncertainty (DU) and the validity mask that filters unreliable pseudo-depth.

DU at a pixel is the variance of two estimates: one on the image and one on its
horizontally flipped copy, flipped back so both refer to the same pixel. With the
default population convention DU = ((a - b) / 2) ** 2, so DU <= 0.25 on normalized
inputs and the default threshold of 0.15 rejects pixels whose estimates differ by
more than about 0.775.
"""

import logging
from typing import Literal, Optional

import numpy as np
from backends.base import DepthEstimatorBackend, invoke
from models.manifest_record import ManifestRecord, RecordKind
from models.rasters import InverseRelativeDepthMap, RgbImage, minmax_normalize
from models.uncertainty import DEFAULT_DU_THRESHOLD, UncertaintyMap, ValidityMask
from schemas.reports import FilterReport
from stages.common import OP_VERSION, append_new, log_summary, map_items, record_failure
from utils.codecs import PathLike, encode_mask, load_array, load_image, save_array
from utils.errors import BackendFailure
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

Variance = Literal["population", "sample"]


def normalize_inverse_depth(
    depth: InverseRelativeDepthMap, force: bool = False
) -> InverseRelativeDepthMap:
    """
    Min-max normalizes an inverse depth map to [0, 1]; constant maps become all zeros.

    Maps already flagged normalized are returned unchanged unless `force` is set,
    since a backend that declares its output normalized defines its own scale.

    Examples:
        [0.2, 0.7] -> [0, 1]; [1, 2, 3] -> [0, 0.5, 1]; constant 5.0 -> zeros.
    """
    if depth.normalized and not force:
        return depth
    return InverseRelativeDepthMap(minmax_normalize(depth.data), normalized=True)


def two_point_variance(a: np.ndarray, b: np.ndarray, variance: Variance = "population"):
    """
    Variance of the two values {a, b} per element.
    """
    if variance == "population":
        return ((a - b) / 2.0) ** 2
    if variance == "sample":
        return (a - b) ** 2 / 2.0
    raise ValueError(f"unknown variance convention '{variance}'")


def _estimate(backend: DepthEstimatorBackend, image: RgbImage, item_id: Optional[str]):
    depth = invoke(backend, backend.estimate, image, item_id=item_id)
    if depth.shape != image.shape:
        raise BackendFailure(
            f"estimate has shape {depth.shape}, image has {image.shape}",
            backend_id=backend.id,
            item_id=item_id,
        )
    return depth


def depth_uncertainty(
    image: RgbImage,
    backend: DepthEstimatorBackend,
    variance: Variance = "population",
    normalize: bool = True,
    item_id: Optional[str] = None,
) -> UncertaintyMap:
    """
    Flip-consistency uncertainty of an estimator on one image.

    Args:
        image (RgbImage): Image to score.
        backend (DepthEstimatorBackend): Estimator under test.
        variance (Variance): "population" ((a-b)/2)^2 or "sample" (a-b)^2/2.
        normalize (bool): Normalize both estimates before differencing.
        item_id (Optional[str]): Attached to backend failures.

    Returns:
        UncertaintyMap: Same dimensions as the image.
    """
    direct = _estimate(backend, image, item_id)
    flipped = _estimate(backend, image.hflip(), item_id).hflip()
    if normalize:
        direct = normalize_inverse_depth(direct)
        flipped = normalize_inverse_depth(flipped)
    return UncertaintyMap(two_point_variance(direct.data, flipped.data, variance))


def validity_mask(du: UncertaintyMap, threshold: float = DEFAULT_DU_THRESHOLD) -> ValidityMask:
    """
    Keep-mask du < threshold.

    Raises:
        NonPositiveThreshold: If threshold <= 0.
    """
    return ValidityMask.from_uncertainty(du, threshold)


def uncertainty_record_id(generated_id: str, estimator_id: str, variance: str, normalize: bool):
    return content_id("du", generated_id, estimator_id, variance, normalize, OP_VERSION)


def filter_generated(
    gen_manifest: PathLike,
    estimator: DepthEstimatorBackend,
    out_manifest: PathLike,
    threshold: float = DEFAULT_DU_THRESHOLD,
    variance: Variance = "population",
    normalize: bool = True,
    jobs: int = 1,
) -> FilterReport:
    """
    Writes an uncertainty record (lossless .npy) and a mask record (1-bit PNG) for
    every generated image in `gen_manifest`. Existing records are kept.
    """
    generated = records_of_kind(require_valid(gen_manifest), RecordKind.GENERATED_IMAGE)
    existing = manifest_ids(out_manifest)
    report = FilterReport(total=len(generated), threshold=threshold)
    logger.info(
        f"Filtering {len(generated)} generated images with {estimator.id} "
        f"(threshold {threshold}, {variance} variance, normalize={normalize})"
    )
    du_dir = artifact_dir(out_manifest, RecordKind.UNCERTAINTY)
    mask_dir = artifact_dir(out_manifest, RecordKind.MASK)

    def process(record: ManifestRecord) -> Optional[list[ManifestRecord]]:
        du_id = uncertainty_record_id(record.id, estimator.id, variance, normalize)
        mask_id = content_id("mask", du_id, threshold)
        if du_id in existing and mask_id in existing:
            return None
        image = load_image(resolve_path(gen_manifest, record, "image"))
        du = depth_uncertainty(image, estimator, variance, normalize, item_id=record.id)
        mask = validity_mask(du, threshold)
        du_path = save_array(du.data, du_dir / f"{du_id}.npy")
        mask_path = encode_mask(mask.data, threshold, mask_dir / f"{mask_id}.png")
        du_record = make_record(
            out_manifest,
            du_id,
            RecordKind.UNCERTAINTY,
            {"uncertainty": du_path},
            {
                "generated_ref": record.id,
                "estimator_id": estimator.id,
                "variance": variance,
                "normalize": normalize,
                "max_du": float(du.data.max()),
            },
        )
        mask_record = make_record(
            out_manifest,
            mask_id,
            RecordKind.MASK,
            {"mask": mask_path},
            {
                "generated_ref": record.id,
                "uncertainty_ref": du_id,
                "threshold": threshold,
                "valid_fraction": mask.valid_fraction,
            },
        )
        return [du_record, mask_record]

    for record, records, error in map_items(process, generated, jobs):
        if error is not None:
            record_failure(report, record.id, error)
            continue
        if records is None:
            report.skipped += 1
        else:
            append_new(out_manifest, records, existing)
        report.success += 1

    wanted = {record.id for record in generated}
    fractions = [
        mask.params["valid_fraction"]
        for mask in records_of_kind(read_manifest(out_manifest, missing_ok=True), RecordKind.MASK)
        if mask.params.get("generated_ref") in wanted and mask.params.get("threshold") == threshold
    ]
    if fractions:
        report.mean_valid_fraction = float(np.mean(fractions))
    log_summary("filter", report)
    return report


def masks_by_generated(manifest: PathLike) -> dict[str, tuple[ManifestRecord, ManifestRecord]]:
    """
    Maps generated image id to its (uncertainty record, mask record) pair. When a
    generated image has several masks the last one appended wins.
    """
    records = read_manifest(manifest)
    uncertainty = {r.id: r for r in records_of_kind(records, RecordKind.UNCERTAINTY)}
    result = {}
    for mask in records_of_kind(records, RecordKind.MASK):
        du = uncertainty.get(mask.params.get("uncertainty_ref", ""))
        if du is not None:
            result[mask.params["generated_ref"]] = (du, mask)
    return result


def load_uncertainty(manifest: PathLike, record: ManifestRecord) -> UncertaintyMap:
    return UncertaintyMap(load_array(resolve_path(manifest, record, "uncertainty")))
