"""
Conditioned generation: generator training on triplets, ingestion of terrestrial
conditioning depths and mass generation of underwater images.

Every generated image is keyed by (depth id, prompt, sample index) and seeded by a
stable hash of those and the base seed, so the stage is reproducible and a rerun
only produces what is missing.
"""

import hashlib
import logging
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
from backends.base import (
    CheckpointRef,
    ConditionedGeneratorBackend,
    DepthEstimatorBackend,
    invoke,
    invoke_train,
)
from models.manifest_record import ManifestRecord, RecordKind
from models.rasters import InverseRelativeDepthMap, MetricDepthMap, RgbImage, downscale_plane
from pydantic import ValidationError
from schemas.configs import GenerationConfig, TrainConfig
from schemas.reports import GenerationReport, IngestReport
from stages.common import OP_VERSION, append_new, log_summary, map_items, record_failure
from stages.datasetbuild import metric_to_normalized_inverse
from stages.prep import pseudo_label_depth
from stages.uncertainty import normalize_inverse_depth
from utils.codecs import (
    PathLike,
    decode_depth,
    encode_depth,
    load_array,
    load_image,
    save_image,
    sha256_file,
)
from utils.errors import (
    BackendFailure,
    CheckpointMismatch,
    EmptyInputDir,
    EmptyTriplets,
    InvalidConfig,
    ManifestInvalid,
    MissingConditioningDepth,
)
from utils.manifest import (
    artifact_dir,
    content_id,
    make_record,
    manifest_append,
    manifest_digest,
    manifest_ids,
    manifest_reorder,
    read_manifest,
    records_of_kind,
    require_valid,
    resolve_path,
)

logger = logging.getLogger("pipeline.stdout")

IngestMode = Literal["metric", "normalized", "image"]

INGEST_EXTENSIONS = {
    "metric": (".npy", ".png"),
    "normalized": (".png",),
    "image": (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"),
}

# generated images keep 16 bits per sample so structure survives persistence
GENERATED_BITDEPTH = 16


def seed_schedule(base_seed: int, depth_id: str, prompt: str, sample_index: int) -> int:
    """
    Stable 64-bit seed for one generated sample.
    """
    key = f"{base_seed}|{depth_id}|{prompt}|{sample_index}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


def _checkpoint_record_id(ref: CheckpointRef, source_digest: str) -> str:
    return content_id("ckpt", ref.model_dump(), source_digest)


def record_checkpoint(
    out_manifest: PathLike, ref: CheckpointRef, cfg: TrainConfig, source: PathLike, count: int
):
    source_digest = manifest_digest(source)
    record_id = _checkpoint_record_id(ref, source_digest)
    if record_id in manifest_ids(out_manifest):
        logger.debug(f"Checkpoint {record_id} already recorded")
        return
    manifest_append(
        out_manifest,
        make_record(
            out_manifest,
            record_id,
            RecordKind.CHECKPOINT,
            params={
                "checkpoint": ref.model_dump(),
                "source_manifest_digest": source_digest,
                "source_records": count,
                "train_config": cfg.model_dump(mode="json"),
            },
        ),
    )


def train_backend(backend, source_manifest: PathLike, cfg: TrainConfig) -> CheckpointRef:
    """
    Runs a backend's exclusive train call and checks the returned reference.

    Raises:
        BackendFailure: If training fails or the reference does not match the backend
            and config.
    """
    ref = invoke_train(backend, backend.train, Path(source_manifest), cfg)
    if ref.backend_id != backend.id:
        raise BackendFailure(f"checkpoint claims backend {ref.backend_id}", backend_id=backend.id)
    if ref.config_hash != cfg.config_hash():
        raise BackendFailure("checkpoint config hash does not match", backend_id=backend.id)
    return ref


def train_generator(
    triplet_manifest: PathLike,
    cfg: TrainConfig,
    backend: ConditionedGeneratorBackend,
    out_manifest: Optional[PathLike] = None,
) -> CheckpointRef:
    """
    Trains the generator's conditioning branch on a triplet manifest.

    Raises:
        EmptyTriplets: If the manifest has no triplet records.
        ManifestInvalid: If the manifest fails validation.
        BackendFailure: If training fails.
    """
    triplets = records_of_kind(require_valid(triplet_manifest), RecordKind.TRIPLET)
    if not triplets:
        raise EmptyTriplets(f"no triplets in {triplet_manifest}")
    logger.info(f"Training {backend.id} on {len(triplets)} triplets")
    ref = train_backend(backend, triplet_manifest, cfg)
    if out_manifest is not None:
        record_checkpoint(out_manifest, ref, cfg, triplet_manifest, len(triplets))
    logger.info(f"Checkpoint {ref.uri} (config {ref.config_hash[:12]})")
    return ref


def load_checkpoint(locator: str) -> CheckpointRef:
    """
    Resolves `MANIFEST#RECORD_ID`, a checkpoint manifest path (last checkpoint
    record wins) or a JSON CheckpointRef.

    Raises:
        ManifestInvalid: If no checkpoint record is found.
    """
    if locator.lstrip().startswith("{"):
        try:
            return CheckpointRef.model_validate_json(locator)
        except ValidationError as e:
            raise ManifestInvalid(f"not a checkpoint reference: {locator}") from e
    path, _, record_id = locator.partition("#")
    checkpoints = records_of_kind(read_manifest(path), RecordKind.CHECKPOINT)
    if record_id:
        checkpoints = [record for record in checkpoints if record.id == record_id]
    if not checkpoints:
        raise ManifestInvalid(f"no checkpoint record found for {locator}")
    return CheckpointRef.model_validate(checkpoints[-1].params["checkpoint"])


def _load_conditioning(path: Path, mode: IngestMode, estimator) -> InverseRelativeDepthMap:
    if mode == "metric":
        if path.suffix.lower() == ".npy":
            depth = MetricDepthMap.ground_truth(load_array(path))
        else:
            depth = decode_depth(path)
            if not isinstance(depth, MetricDepthMap):
                raise InvalidConfig(f"{path.name} does not hold metric depth")
        return metric_to_normalized_inverse(depth)
    if mode == "normalized":
        depth = decode_depth(path)
        if not isinstance(depth, InverseRelativeDepthMap):
            raise InvalidConfig(f"{path.name} does not hold inverse depth")
        return normalize_inverse_depth(depth)
    return pseudo_label_depth(load_image(path), estimator, item_id=path.name)


def ingest_conditioning_depths(
    source_dir: PathLike,
    out_manifest: PathLike,
    mode: IngestMode = "metric",
    estimator: Optional[DepthEstimatorBackend] = None,
    jobs: int = 1,
) -> IngestReport:
    """
    Converts terrestrial depth sources into normalized inverse depth records.

    Modes:
        metric: `.npy` meters or encoded metric PNG; 1/d then min-max, holes farthest.
        normalized: encoded inverse PNG, min-max normalized unless flagged normalized.
        image: RGB images through a depth estimator.

    Raises:
        EmptyInputDir: If no source files match the mode.
        InvalidConfig: If mode is "image" and no estimator is given.
    """
    if mode not in INGEST_EXTENSIONS:
        raise InvalidConfig(f"unknown ingest mode '{mode}'")
    if mode == "image" and estimator is None:
        raise InvalidConfig("image ingestion needs a depth estimator")
    directory = Path(source_dir)
    files = sorted(
        path
        for path in (directory.iterdir() if directory.is_dir() else ())
        if path.is_file()
        and path.suffix.lower() in INGEST_EXTENSIONS[mode]
        and not path.name.startswith(".")
    )
    if not files:
        raise EmptyInputDir(f"no {mode} depth sources in {directory}")
    existing = manifest_ids(out_manifest)
    report = IngestReport(total=len(files), mode=mode)
    estimator_id = estimator.id if estimator is not None else None
    logger.info(f"Ingesting {len(files)} {mode} depth sources from {directory}")
    depth_dir = artifact_dir(out_manifest, RecordKind.DEPTH)

    def process(path: Path) -> Optional[ManifestRecord]:
        depth_id = content_id("cond", sha256_file(path), mode, estimator_id, OP_VERSION)
        if depth_id in existing:
            return None
        depth = _load_conditioning(path, mode, estimator)
        depth_path = encode_depth(depth, depth_dir / f"{depth_id}.png")
        return make_record(
            out_manifest,
            depth_id,
            RecordKind.DEPTH,
            {"depth": depth_path},
            {
                "source_name": path.name,
                "mode": mode,
                "estimator_id": estimator_id,
                "conversion": "reciprocal_minmax" if mode == "metric" else "minmax",
                "normalized": True,
                "width": depth.width,
                "height": depth.height,
            },
        )

    for path, record, error in map_items(process, files, jobs):
        if error is not None:
            record_failure(report, path.name, error)
            continue
        if record is None:
            report.skipped += 1
        else:
            append_new(out_manifest, [record], existing)
        report.success += 1

    log_summary("ingest-depths", report)
    return report


def generation_params(
    prompt: str,
    cfg: GenerationConfig,
    seed: int,
    backend: ConditionedGeneratorBackend,
    checkpoint: CheckpointRef,
) -> dict[str, Any]:
    return {
        "prompt": prompt,
        "seed": seed,
        "guidance_scale": cfg.guidance_scale,
        "num_steps": cfg.num_steps,
        "backend_id": backend.id,
        "checkpoint": checkpoint.model_dump(),
        "downscale_factor": backend.downscale_factor,
    }


def generate_conditioned(
    depth: InverseRelativeDepthMap,
    prompt: str,
    cfg: GenerationConfig,
    seed: int,
    backend: ConditionedGeneratorBackend,
    checkpoint: CheckpointRef,
    item_id: Optional[str] = None,
) -> RgbImage:
    """
    Samples one image conditioned on a normalized depth map.

    Raises:
        CheckpointMismatch: If the checkpoint was produced by another backend.
        BackendFailure: If sampling fails or the output size is wrong.
    """
    if checkpoint.backend_id != backend.id:
        raise CheckpointMismatch(
            f"checkpoint of backend {checkpoint.backend_id} used with backend {backend.id}"
        )
    depth = normalize_inverse_depth(depth)
    image = invoke(backend, backend.sample, depth, prompt, cfg, seed, checkpoint, item_id=item_id)
    factor = backend.downscale_factor
    expected = (depth.height // factor, depth.width // factor)
    if image.shape != expected:
        raise BackendFailure(
            f"sample has shape {image.shape}, expected {expected} (downscale {factor})",
            backend_id=backend.id,
            item_id=item_id,
        )
    return image


def generate_dataset_samples(
    depth_manifest: PathLike,
    cfg: GenerationConfig,
    backend: ConditionedGeneratorBackend,
    checkpoint: CheckpointRef,
    out_manifest: PathLike,
    jobs: int = 1,
) -> GenerationReport:
    """
    Generates samples_per_condition images per (depth, prompt).

    Records are appended in (depth id, prompt index, sample index) order; existing
    records are skipped by id and failed items are reported without stopping the run.
    Records filled in by a rerun are moved back into that order at the end.

    Raises:
        MissingConditioningDepth: If the manifest holds no depth records.
        CheckpointMismatch: If the checkpoint was produced by another backend.
    """
    if checkpoint.backend_id != backend.id:
        raise CheckpointMismatch(
            f"checkpoint of backend {checkpoint.backend_id} used with backend {backend.id}"
        )
    depths = sorted(
        records_of_kind(require_valid(depth_manifest), RecordKind.DEPTH), key=lambda r: r.id
    )
    if not depths:
        raise MissingConditioningDepth(f"no depth records in {depth_manifest}")
    items = [
        (depth, prompt_index, prompt, sample_index)
        for depth in depths
        for prompt_index, prompt in enumerate(cfg.prompts)
        for sample_index in range(cfg.samples_per_condition)
    ]
    existing = manifest_ids(out_manifest)
    report = GenerationReport(total=len(items), expected=len(items))
    factor = backend.downscale_factor
    logger.info(
        f"Generating {len(depths)} depths x {len(cfg.prompts)} prompts x "
        f"{cfg.samples_per_condition} samples with {backend.id} "
        f"(guidance {cfg.guidance_scale}, {cfg.num_steps} steps)"
    )
    image_dir = artifact_dir(out_manifest, RecordKind.GENERATED_IMAGE)
    depth_dir = artifact_dir(out_manifest, RecordKind.DEPTH)

    def item_id(item) -> str:
        depth, _, prompt, sample_index = item
        return content_id(
            "gen",
            depth.id,
            prompt,
            sample_index,
            cfg.base_seed,
            cfg.guidance_scale,
            cfg.num_steps,
            checkpoint.model_dump(),
            factor,
        )

    def process(item) -> Optional[ManifestRecord]:
        depth_record, prompt_index, prompt, sample_index = item
        gen_id = item_id(item)
        if gen_id in existing:
            return None
        depth_path = resolve_path(depth_manifest, depth_record, "depth")
        depth = decode_depth(depth_path)
        if not isinstance(depth, InverseRelativeDepthMap):
            raise ManifestInvalid(f"depth record {depth_record.id} is not inverse depth")
        depth = normalize_inverse_depth(depth)
        seed = seed_schedule(cfg.base_seed, depth_record.id, prompt, sample_index)
        image = generate_conditioned(depth, prompt, cfg, seed, backend, checkpoint, gen_id)
        image_path = save_image(image, image_dir / f"{gen_id}.png", GENERATED_BITDEPTH)
        if factor > 1:
            recorded = InverseRelativeDepthMap(
                np.clip(downscale_plane(depth.data, factor), 0.0, 1.0), normalized=True
            )
            depth_path = encode_depth(recorded, depth_dir / f"{gen_id}.png")
        return make_record(
            out_manifest,
            gen_id,
            RecordKind.GENERATED_IMAGE,
            {"image": image_path, "depth": depth_path},
            {
                "depth_ref": depth_record.id,
                "prompt_index": prompt_index,
                "sample_index": sample_index,
                **generation_params(prompt, cfg, seed, backend, checkpoint),
            },
        )

    for item, record, error in map_items(process, items, jobs):
        if error is not None:
            record_failure(report, item_id(item), error)
            continue
        if record is None:
            report.skipped += 1
        else:
            append_new(out_manifest, [record], existing)
        report.success += 1

    # items that failed earlier and succeeded on this run were appended last
    if report.success:
        manifest_reorder(out_manifest, [item_id(item) for item in items])
    log_summary("generate", report)
    return report
