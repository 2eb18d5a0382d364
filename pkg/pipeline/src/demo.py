"""
End-to-end smoke run of the pipeline on mock backends.

prepare -> train-gen -> ingest-depths -> generate (2 depths x 2 prompts x 2 samples)
-> filter -> build -> train-depth -> eval (green channel depth model) -> report.
Timestamps come from a fixed clock, so two runs with the same seed produce
byte-identical work directories.
"""

import hashlib
import logging
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from backends.mocks import (
    GreenChannelDepthModel,
    MockCaptioner,
    MockConditionedGenerator,
    MockDepthEstimator,
)
from models.rasters import RgbImage
from schemas.configs import ConversionConfig, EvalConfig, GenerationConfig, TrainConfig
from stages.datasetbuild import assemble_dataset
from stages.evaluate import (
    evaluate_model,
    render_report,
    result_row,
    train_depth_model,
    write_eval_results,
)
from stages.genpipe import generate_dataset_samples, ingest_conditioning_depths, train_generator
from stages.prep import build_triplets
from stages.uncertainty import filter_generated, load_uncertainty, masks_by_generated
from utils.codecs import PathLike, save_array, save_image
from utils.errors import DemoCheckFailed, PipelineError
from utils.manifest import use_clock

logger = logging.getLogger("pipeline.stdout")

DEMO_EPOCH = datetime(2024, 1, 1, tzinfo=timezone.utc)
IMAGE_SIZE = (24, 32)
SOURCE_IMAGES = 3
CONDITIONING_DEPTHS = 2
SAMPLES_PER_CONDITION = 2
EXPECTED_GENERATED = CONDITIONING_DEPTHS * 2 * SAMPLES_PER_CONDITION
ORACLE_TOLERANCE = 1e-6


def _smooth_image(rng: np.random.Generator) -> RgbImage:
    height, width = IMAGE_SIZE
    y, x = np.mgrid[0:height, 0:width]
    channels = []
    for _ in range(3):
        a, b, c = rng.uniform(0.1, 0.9, 3)
        channels.append(a + (b - a) * x / (width - 1) * 0.5 + (c - a) * y / (height - 1) * 0.5)
    return RgbImage(np.clip(np.stack(channels, axis=-1), 0.0, 1.0))


def _metric_depth(rng: np.random.Generator) -> np.ndarray:
    height, width = IMAGE_SIZE
    near, far = rng.uniform(0.5, 3.0), rng.uniform(8.0, 18.0)
    ramp = np.linspace(near, far, height)[:, np.newaxis] * np.ones((1, width))
    return ramp + rng.uniform(0.0, 0.5, (height, width))


def _check(condition: bool, message: str):
    if not condition:
        raise DemoCheckFailed(message)


def work_dir_digest(work_dir: PathLike) -> str:
    """
    sha256 over the relative paths and contents of every file under `work_dir`.
    """
    root = Path(work_dir)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(path.relative_to(root).as_posix().encode("utf-8"))
        digest.update(hashlib.sha256(path.read_bytes()).digest())
    return digest.hexdigest()


def _run(work: Path, seed: int):
    rng = np.random.default_rng(seed)
    image_dir, depth_source = work / "inputs" / "images", work / "inputs" / "depths"
    for index in range(SOURCE_IMAGES):
        save_image(_smooth_image(rng), image_dir / f"underwater_{index:02d}.png")
    for index in range(CONDITIONING_DEPTHS):
        save_array(_metric_depth(rng), depth_source / f"terrestrial_{index:02d}.npy")

    estimator = MockDepthEstimator()
    generator = MockConditionedGenerator()
    depth_model = GreenChannelDepthModel()
    manifests = work / "manifests"

    report = build_triplets(image_dir, estimator, MockCaptioner(), manifests / "triplets.jsonl")
    _check(report.success == SOURCE_IMAGES, f"prepared {report.success}/{SOURCE_IMAGES} images")

    checkpoint = train_generator(
        manifests / "triplets.jsonl",
        TrainConfig(backend_id=generator.id),
        generator,
        manifests / "checkpoints.jsonl",
    )
    ingest_conditioning_depths(depth_source, manifests / "depths.jsonl", mode="metric")

    generation = GenerationConfig(samples_per_condition=SAMPLES_PER_CONDITION, base_seed=seed)
    report = generate_dataset_samples(
        manifests / "depths.jsonl", generation, generator, checkpoint, manifests / "generated.jsonl"
    )
    _check(
        report.success == EXPECTED_GENERATED and not report.failed,
        f"generated {report.success}/{EXPECTED_GENERATED} images",
    )

    filter_generated(manifests / "generated.jsonl", estimator, manifests / "uncertainty.jsonl")
    for du_record, _ in masks_by_generated(manifests / "uncertainty.jsonl").values():
        du = load_uncertainty(manifests / "uncertainty.jsonl", du_record)
        _check(float(du.data.max()) == 0.0, f"uncertainty of {du_record.id} is not zero")

    conversion = ConversionConfig()
    report = assemble_dataset(
        manifests / "generated.jsonl",
        manifests / "uncertainty.jsonl",
        conversion,
        0.15,
        0.5,
        manifests / "dataset.jsonl",
    )
    _check(report.pairs == EXPECTED_GENERATED, f"assembled {report.pairs} dataset pairs")

    depth_checkpoint = train_depth_model(
        manifests / "dataset.jsonl",
        TrainConfig(backend_id=depth_model.id),
        depth_model,
        manifests / "checkpoints.jsonl",
    )
    evaluation = evaluate_model(
        depth_model, manifests / "dataset.jsonl", EvalConfig(), depth_checkpoint
    )
    aggregate = evaluation.aggregate
    _check(aggregate is not None, "evaluation produced no aggregate")
    errors = [aggregate.rmse, aggregate.rmse_log, aggregate.a_rel, aggregate.s_rel]
    errors += [aggregate.log10, aggregate.si_log]
    _check(aggregate.delta1 == 1.0, f"oracle delta1 is {aggregate.delta1}")
    _check(max(errors) < ORACLE_TOLERANCE, f"oracle errors {errors}")

    write_eval_results(evaluation, work / "eval", depth_model.id)
    render_report([result_row(evaluation, depth_model.id)], work / "report")


def run_demo_pipeline(work_dir: PathLike, seed: int = 0) -> int:
    """
    Runs the mock pipeline in `work_dir` and checks its invariants.

    Returns:
        int: 0 when every stage and check passed, 1 otherwise.
    """
    work = Path(work_dir)
    logger.info(f"Running the demo pipeline in {work} (seed {seed})")
    try:
        with use_clock(lambda: DEMO_EPOCH):
            _run(work, seed)
    except PipelineError as e:
        logger.error(f"Demo pipeline failed: {e}")
        return 1
    logger.info(f"Demo pipeline passed, work dir digest {work_dir_digest(work)[:16]}")
    return 0
