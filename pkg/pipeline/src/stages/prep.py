"""
Triplet preparation: pseudo-depth and captions for a directory of underwater images.

For every input image the stage writes four records: the copied source image, its
normalized inverse depth, its caption and the triplet linking them. Record ids are
derived from the image bytes and the backend ids, so reruns skip finished images.
"""

import logging
import shutil
from pathlib import Path
from typing import Optional

from backends.base import CaptionBackend, DepthEstimatorBackend, invoke
from models.manifest_record import ManifestRecord, RecordKind
from models.rasters import Caption, InverseRelativeDepthMap, RgbImage
from models.records import Triplet
from schemas.reports import TripletBuildReport
from stages.common import OP_VERSION, append_new, log_summary, map_items, record_failure
from stages.uncertainty import normalize_inverse_depth
from utils.codecs import (
    IMAGE_EXTENSIONS,
    PathLike,
    atomic_output,
    encode_depth,
    load_image,
    save_text,
    sha256_file,
)
from utils.errors import BackendFailure, EmptyCaption, EmptyInputDir
from utils.manifest import artifact_dir, content_id, make_record, manifest_ids

logger = logging.getLogger("pipeline.stdout")

NORMALIZATION = "minmax"


def pseudo_label_depth(
    image: RgbImage, backend: DepthEstimatorBackend, item_id: Optional[str] = None
) -> InverseRelativeDepthMap:
    """
    Estimates and normalizes the inverse relative depth of an image.

    Raises:
        BackendFailure: If the backend fails or returns a map of the wrong size.
    """
    depth = invoke(backend, backend.estimate, image, item_id=item_id)
    if depth.shape != image.shape:
        raise BackendFailure(
            f"depth {depth.shape} does not match image {image.shape}",
            backend_id=backend.id,
            item_id=item_id,
        )
    return normalize_inverse_depth(depth)


def caption_image(
    image: RgbImage, backend: CaptionBackend, item_id: Optional[str] = None
) -> Caption:
    """
    Captions an image.

    Raises:
        BackendFailure: If the backend fails.
        EmptyCaption: If the backend returned blank text.
    """
    result = invoke(backend, backend.caption, image, item_id=item_id)
    text = result.text if isinstance(result, Caption) else str(result)
    if len(text.strip()) < 1:
        raise EmptyCaption(f"captioner {backend.id} returned an empty caption for {item_id}")
    return result if isinstance(result, Caption) else Caption(text=text)


def list_images(image_dir: PathLike) -> list[Path]:
    """
    Image files directly inside `image_dir`, sorted by name.

    Raises:
        EmptyInputDir: If the directory is missing or holds no image files.
    """
    directory = Path(image_dir)
    if not directory.is_dir():
        raise EmptyInputDir(f"{directory} is not a directory")
    files = sorted(
        path
        for path in directory.iterdir()
        if path.is_file() and path.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not files:
        raise EmptyInputDir(f"no images in {directory}")
    return files


def _copy_source(source: Path, target: Path) -> Path:
    with open(source, "rb") as reader, atomic_output(target) as writer:
        shutil.copyfileobj(reader, writer)
    return target


def build_triplets(
    image_dir: PathLike,
    estimator: DepthEstimatorBackend,
    captioner: CaptionBackend,
    out_manifest: PathLike,
    jobs: int = 1,
) -> TripletBuildReport:
    """
    Builds one triplet per readable image in `image_dir`.

    Failures are per image and non-fatal; success + failed equals the number of
    image files. Records are appended in file name order.

    Args:
        image_dir (PathLike): Directory of underwater images.
        estimator (DepthEstimatorBackend): Pseudo-depth backend.
        captioner (CaptionBackend): Caption backend.
        out_manifest (PathLike): Manifest to extend.
        jobs (int): Worker threads.

    Returns:
        TripletBuildReport: Counts and failures.
    """
    files = list_images(image_dir)
    existing = manifest_ids(out_manifest)
    report = TripletBuildReport(total=len(files))
    logger.info(
        f"Preparing {len(files)} images from {image_dir} "
        f"(estimator {estimator.id}, captioner {captioner.id})"
    )

    source_dir = artifact_dir(out_manifest, RecordKind.SOURCE_IMAGE)
    depth_dir = artifact_dir(out_manifest, RecordKind.DEPTH)
    caption_dir = artifact_dir(out_manifest, RecordKind.CAPTION)

    def process(path: Path) -> Optional[list[ManifestRecord]]:
        digest = sha256_file(path)
        image_id = content_id("img", digest)
        depth_id = content_id("dep", digest, estimator.id, NORMALIZATION, OP_VERSION)
        caption_id = content_id("cap", digest, captioner.id, OP_VERSION)
        triplet_id = content_id("tri", image_id, depth_id, caption_id)
        if triplet_id in existing:
            return None
        image = load_image(path)
        depth = pseudo_label_depth(image, estimator, item_id=path.name)
        caption = caption_image(image, captioner, item_id=path.name)

        source_path = _copy_source(path, source_dir / f"{image_id}{path.suffix.lower()}")
        depth_path = encode_depth(depth, depth_dir / f"{depth_id}.png")
        caption_path = save_text(caption.text, caption_dir / f"{caption_id}.txt")
        triplet = Triplet(
            image_ref=image_id,
            depth_ref=depth_id,
            caption_ref=caption_id,
            estimator_id=estimator.id,
            captioner_id=captioner.id,
        )
        size = {"width": image.width, "height": image.height}
        return [
            make_record(
                out_manifest,
                image_id,
                RecordKind.SOURCE_IMAGE,
                {"image": source_path},
                {"source_name": path.name, **size},
            ),
            make_record(
                out_manifest,
                depth_id,
                RecordKind.DEPTH,
                {"depth": depth_path},
                {
                    "image_ref": image_id,
                    "estimator_id": estimator.id,
                    "normalized": True,
                    "normalization": NORMALIZATION,
                    **size,
                },
            ),
            make_record(
                out_manifest,
                caption_id,
                RecordKind.CAPTION,
                {"caption": caption_path},
                {"image_ref": image_id, "captioner_id": captioner.id, "text": caption.text},
            ),
            make_record(
                out_manifest,
                triplet_id,
                RecordKind.TRIPLET,
                {"image": source_path, "depth": depth_path, "caption": caption_path},
                {**triplet.model_dump(), "normalization": NORMALIZATION, **size},
            ),
        ]

    for path, records, error in map_items(process, files, jobs):
        if error is not None:
            record_failure(report, path.name, error)
            continue
        if records is None:
            logger.debug(f"{path.name} already prepared")
            report.skipped += 1
        else:
            append_new(out_manifest, records, existing)
        report.success += 1

    log_summary("prepare", report)
    return report
