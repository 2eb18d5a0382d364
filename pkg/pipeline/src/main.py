"""
Command line entry point: every pipeline stage as a subcommand.

Exit codes: 0 on full success, 1 when items failed or a stage aborted, 2 on usage
and configuration errors.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Optional

import sentry_sdk
from backends.base import CheckpointRef
from backends.registry import BackendRegistry
from config_manager import ConfigurationManager, stage_config
from demo import run_demo_pipeline
from models.rasters import MetricDepthMap
from schemas.configs import DepthMapping, PipelineConfig, TrainConfig
from schemas.reports import StageReport
from stages.datasetbuild import assemble_dataset, dataset_stats, stats_table
from stages.evaluate import (
    evaluate_model,
    evaluate_predictions,
    load_result_rows,
    published_results,
    published_tables,
    render_report,
    train_depth_model,
    write_eval_results,
)
from stages.genpipe import (
    generate_dataset_samples,
    ingest_conditioning_depths,
    load_checkpoint,
    train_generator,
)
from stages.physics import estimate_backscatter, recover_scene, synthesize_underwater, water_preset
from stages.prep import build_triplets
from stages.uncertainty import filter_generated
from utils.codecs import decode_depth, load_array, load_image, save_image
from utils.errors import ConfigError, InvalidConfig, PipelineError, UnknownBackend
from utils.manifest import manifest_validate

LOG_LEVEL = os.getenv("LOG_LEVEL", default="INFO")
SENTRY_DSN = os.getenv("SENTRY_DSN")
SENTRY_RELEASE = os.getenv("SENTRY_RELEASE")
ENV = os.getenv("ENV")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2

LOG_FORMAT = (
    "%(asctime)s [%(levelname)s] [%(processName)s: %(process)d] "
    "[%(threadName)s: %(thread)d] %(name)s: %(message)s"
)

logger = logging.getLogger("pipeline.stdout")


def configure_logging(level: str = LOG_LEVEL):
    logger.setLevel(logging.getLevelName(level.upper()))
    if not logger.handlers:
        stream_handler = logging.StreamHandler(sys.stdout)
        stream_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(stream_handler)


def init_sentry():
    sentry_sdk.init(
        dsn=SENTRY_DSN,
        environment=ENV,
        max_breadcrumbs=50,
        debug=True if LOG_LEVEL == "DEBUG" else False,
        traces_sample_rate=1.0,
        send_default_pii=True,
        release=SENTRY_RELEASE,
    )


class Context:
    """
    Effective configuration and backend registry of one command line run.
    """

    def __init__(self, manager: ConfigurationManager):
        self.manager = manager
        self.registry = BackendRegistry(manager.config.backends)

    @property
    def config(self) -> PipelineConfig:
        return self.manager.config


def _print_json(model):
    print(model.model_dump_json(indent=2))


def _exit_for(report: StageReport) -> int:
    _print_json(report)
    return EXIT_PARTIAL if report.failed else EXIT_OK


def _hyperparameters(text: Optional[str]) -> dict:
    if not text:
        return {}
    try:
        values = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"--hyperparameters is not JSON: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError("--hyperparameters must be a JSON object")
    return values


def _checkpoint(locator: Optional[str]) -> Optional[CheckpointRef]:
    return load_checkpoint(locator) if locator else None


def _load_range(path: str) -> MetricDepthMap:
    if Path(path).suffix.lower() == ".npy":
        return MetricDepthMap.ground_truth(load_array(path))
    depth = decode_depth(path)
    if not isinstance(depth, MetricDepthMap):
        raise InvalidConfig(f"{path} does not hold metric depth")
    return depth


def cmd_prepare(ctx: Context, args) -> int:
    report = build_triplets(
        args.images,
        ctx.registry.estimator(args.estimator),
        ctx.registry.captioner(args.captioner),
        args.out,
        jobs=ctx.config.jobs,
    )
    return _exit_for(report)


def cmd_ingest_depths(ctx: Context, args) -> int:
    estimator = ctx.registry.estimator(args.estimator) if args.mode == "image" else None
    report = ingest_conditioning_depths(
        args.source, args.out, mode=args.mode, estimator=estimator, jobs=ctx.config.jobs
    )
    return _exit_for(report)


def cmd_train_gen(ctx: Context, args) -> int:
    cfg = TrainConfig(
        backend_id=args.backend, hyperparameters=_hyperparameters(args.hyperparameters)
    )
    ref = train_generator(args.triplets, cfg, ctx.registry.generator(args.backend), args.out)
    _print_json(ref)
    return EXIT_OK


def _prompts(args) -> Optional[list[str]]:
    prompts = list(args.prompt or [])
    if args.prompts:
        try:
            text = Path(args.prompts).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"cannot read prompts file {args.prompts}: {e}") from e
        prompts += [line.strip() for line in text.splitlines() if line.strip()]
        if not prompts:
            raise ConfigError(f"prompts file {args.prompts} holds no prompts")
    return prompts or None


def cmd_generate(ctx: Context, args) -> int:
    cfg = stage_config(
        ctx.config.generation,
        prompts=_prompts(args),
        samples_per_condition=args.samples,
        guidance_scale=args.guidance,
        num_steps=args.steps,
        base_seed=args.seed,
    )
    report = generate_dataset_samples(
        args.depths,
        cfg,
        ctx.registry.generator(args.backend),
        load_checkpoint(args.checkpoint),
        args.out,
        jobs=ctx.config.jobs,
    )
    return _exit_for(report)


def cmd_filter(ctx: Context, args) -> int:
    cfg = stage_config(
        ctx.config.uncertainty,
        threshold=args.threshold,
        variance=args.variance,
        normalize=None if args.normalize is None else args.normalize == "on",
    )
    report = filter_generated(
        args.generated,
        ctx.registry.estimator(args.estimator),
        args.out,
        threshold=cfg.threshold,
        variance=cfg.variance,
        normalize=cfg.normalize,
        jobs=ctx.config.jobs,
    )
    return _exit_for(report)


def cmd_build(ctx: Context, args) -> int:
    conversion = stage_config(
        ctx.config.conversion, d_min_m=args.d_min, d_max_m=args.d_max, mapping=args.mapping
    )
    uncertainty = stage_config(ctx.config.uncertainty, threshold=args.threshold)
    dataset = stage_config(ctx.config.dataset, split_ratio=args.split_ratio)
    report = assemble_dataset(
        args.generated,
        args.uncertainty,
        conversion,
        uncertainty.threshold,
        dataset.split_ratio,
        args.out,
        estimator=ctx.registry.estimator(args.estimator),
        variance=uncertainty.variance,
        normalize=uncertainty.normalize,
        jobs=ctx.config.jobs,
    )
    return _exit_for(report)


def cmd_stats(ctx: Context, args) -> int:
    stats = dataset_stats(args.dataset)
    if args.json:
        _print_json(stats)
    else:
        print(stats_table(stats))
    return EXIT_OK


def cmd_train_depth(ctx: Context, args) -> int:
    cfg = TrainConfig(
        backend_id=args.backend, hyperparameters=_hyperparameters(args.hyperparameters)
    )
    ref = train_depth_model(args.dataset, cfg, ctx.registry.depth_model(args.backend), args.out)
    _print_json(ref)
    return EXIT_OK


def cmd_eval(ctx: Context, args) -> int:
    cfg = stage_config(
        ctx.config.evaluation,
        median_scaling=True if args.median_scaling else None,
        gt_max_m=args.gt_max,
        aggregation=args.aggregation,
    )
    if args.pred is not None:
        if args.gt is None:
            raise ConfigError("--pred needs --gt")
        report = evaluate_predictions(args.pred, args.gt, args.mask, cfg, jobs=ctx.config.jobs)
        name = args.name or Path(args.pred).name
    else:
        if args.testset is None:
            raise ConfigError("eval needs --testset or --pred")
        backend = ctx.registry.depth_model(args.backend)
        report = evaluate_model(
            backend, args.testset, cfg, _checkpoint(args.checkpoint), jobs=ctx.config.jobs
        )
        name = args.name or backend.id
    write_eval_results(report, args.out, name, args.group)
    return _exit_for(report)


def cmd_report(ctx: Context, args) -> int:
    rows = published_results(args.published) if args.published else load_result_rows(args.results)
    for path in render_report(rows, args.out):
        logger.info(f"Wrote {path}")
    print((Path(args.out) / "results.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_enhance(ctx: Context, args) -> int:
    image = load_image(args.image)
    depth = _load_range(args.depth)
    fit = estimate_backscatter(image, depth, n_bins=args.bins, percentile=args.percentile)
    scene = recover_scene(
        image,
        depth,
        fit,
        attenuation=args.attenuation,
        white_balance=not args.no_white_balance,
    )
    save_image(scene, args.out, args.bitdepth)
    _print_json(fit)
    return EXIT_OK


def cmd_synth(ctx: Context, args) -> int:
    water = water_preset(args.water)
    image = synthesize_underwater(load_image(args.image), _load_range(args.depth), water)
    save_image(image, args.out, args.bitdepth)
    logger.info(f"Rendered {args.image} through water type {water.name} to {args.out}")
    return EXIT_OK


def cmd_validate(ctx: Context, args) -> int:
    report = manifest_validate(args.manifest)
    _print_json(report)
    return EXIT_OK if report.ok else EXIT_PARTIAL


def cmd_demo(ctx: Context, args) -> int:
    return run_demo_pipeline(args.work_dir, args.seed)


def add_common_flags(parser: argparse.ArgumentParser, default):
    parser.add_argument("--config", default=default, help="JSON configuration file")
    parser.add_argument("--log-level", default=default, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--jobs", type=int, default=default, help="worker threads per stage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atlantis-pipeline",
        description="Underwater depth dataset generation, filtering and evaluation",
    )
    add_common_flags(parser, None)
    # Given after the subcommand they override the same flags given before it
    common = argparse.ArgumentParser(add_help=False)
    add_common_flags(common, argparse.SUPPRESS)
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name: str, handler: Callable[[Context, argparse.Namespace], int], help: str):
        sub = commands.add_parser(name, help=help, description=help, parents=[common])
        sub.set_defaults(handler=handler)
        return sub

    sub = command("prepare", cmd_prepare, "Build image/depth/caption triplets")
    sub.add_argument("--images", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--estimator", default="mock-luminance")
    sub.add_argument("--captioner", default="mock-caption")

    sub = command("ingest-depths", cmd_ingest_depths, "Ingest terrestrial conditioning depths")
    sub.add_argument("--source", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--mode", choices=["metric", "normalized", "image"], default="metric")
    sub.add_argument("--estimator", default="mock-luminance")

    sub = command("train-gen", cmd_train_gen, "Train the generator's conditioning branch")
    sub.add_argument("--triplets", required=True)
    sub.add_argument("--out", required=True, help="checkpoint manifest")
    sub.add_argument("--backend", default="mock-generator")
    sub.add_argument("--hyperparameters", help="JSON object passed to the backend")

    sub = command("generate", cmd_generate, "Generate depth-conditioned underwater images")
    sub.add_argument("--depths", required=True)
    sub.add_argument("--checkpoint", required=True, help="MANIFEST or MANIFEST#ID")
    sub.add_argument("--out", required=True)
    sub.add_argument("--backend", default="mock-generator")
    sub.add_argument("--prompt", action="append", help="repeat for several prompts")
    sub.add_argument("--prompts", help="text file with one prompt per line")
    sub.add_argument("--samples", type=int, help="samples per depth and prompt")
    sub.add_argument("--guidance", type=float)
    sub.add_argument("--steps", type=int)
    sub.add_argument("--seed", type=int)

    sub = command("filter", cmd_filter, "Score generated images with depth uncertainty")
    sub.add_argument("--images", "--generated", dest="generated", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--estimator", default="mock-luminance")
    sub.add_argument("--threshold", type=float)
    sub.add_argument("--variance", choices=["population", "sample"])
    sub.add_argument("--normalize", choices=["on", "off"])

    sub = command("build", cmd_build, "Assemble the metric depth dataset")
    sub.add_argument("--generated", required=True)
    sub.add_argument("--uncertainty", help="manifest written by filter")
    sub.add_argument("--out", required=True)
    sub.add_argument("--estimator", default="mock-luminance")
    sub.add_argument("--threshold", type=float)
    sub.add_argument("--split", "--split-ratio", dest="split_ratio", type=float)
    sub.add_argument("--dmin", "--d-min", dest="d_min", type=float)
    sub.add_argument("--dmax", "--d-max", dest="d_max", type=float)
    sub.add_argument("--mapping", choices=[mapping.value for mapping in DepthMapping])

    sub = command("stats", cmd_stats, "Summarize an assembled dataset")
    sub.add_argument("--dataset", required=True)
    sub.add_argument("--json", action="store_true")

    sub = command("train-depth", cmd_train_depth, "Train a depth model on a dataset")
    sub.add_argument("--dataset", required=True)
    sub.add_argument("--out", required=True, help="checkpoint manifest")
    sub.add_argument("--backend", default="mock-green-model")
    sub.add_argument("--hyperparameters", help="JSON object passed to the backend")

    sub = command("eval", cmd_eval, "Evaluate a depth model or precomputed predictions")
    sub.add_argument("--backend", default="mock-green-model")
    sub.add_argument("--checkpoint", help="MANIFEST or MANIFEST#ID")
    sub.add_argument("--testset")
    sub.add_argument("--pred")
    sub.add_argument("--gt")
    sub.add_argument("--mask")
    sub.add_argument("--out", required=True)
    sub.add_argument("--name", help="row name in reports")
    sub.add_argument("--group", default="")
    sub.add_argument("--median-scaling", action="store_true")
    sub.add_argument("--gt-max", type=float)
    sub.add_argument("--aggregation", choices=["per_image", "pooled"])

    sub = command("report", cmd_report, "Render comparison tables and plots")
    source = sub.add_mutually_exclusive_group(required=True)
    source.add_argument("--results", help="directory of eval outputs")
    source.add_argument("--published", choices=published_tables(), help="stored published table")
    sub.add_argument("--out", required=True)

    sub = command("enhance", cmd_enhance, "Dewater an underwater image using its depth")
    sub.add_argument("--image", required=True)
    sub.add_argument("--depth", required=True, help=".npy meters or encoded metric PNG")
    sub.add_argument("--out", required=True)
    sub.add_argument("--bins", type=int, default=10)
    sub.add_argument("--percentile", type=float, default=0.01)
    sub.add_argument(
        "--attenuation", choices=["illumination", "constant"], default="illumination"
    )
    sub.add_argument("--no-white-balance", action="store_true")
    sub.add_argument("--bitdepth", type=int, choices=[8, 16], default=8)

    sub = command("synth", cmd_synth, "Render an image through a water type")
    sub.add_argument("--image", required=True)
    sub.add_argument("--depth", required=True, help=".npy meters or encoded metric PNG")
    sub.add_argument("--water", required=True, help="water type preset name")
    sub.add_argument("--out", required=True)
    sub.add_argument("--bitdepth", type=int, choices=[8, 16], default=8)

    sub = command("validate", cmd_validate, "Check a manifest for consistency")
    sub.add_argument("--manifest", required=True)

    sub = command("demo", cmd_demo, "Run the whole pipeline on mock backends")
    sub.add_argument("--work-dir", required=True)
    sub.add_argument("--seed", type=int, default=0)

    return parser


def run_cli(argv: Optional[list[str]] = None) -> int:
    """
    Parses `argv` and runs one subcommand.

    Returns:
        int: 0 on success, 1 on item failures or runtime errors, 2 on usage and
            configuration errors.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    configure_logging(args.log_level or LOG_LEVEL)
    try:
        manager = ConfigurationManager(args.config)
        manager.override(jobs=args.jobs)
        ctx = Context(manager)
        logger.debug(f"Running {args.command} with config {manager.config_hash()[:12]}")
        return args.handler(ctx, args)
    except (ConfigError, InvalidConfig, UnknownBackend) as e:
        logger.error(f"{args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as e:
        logger.error(f"{args.command} failed: {e}")
        sentry_sdk.capture_exception(error=e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARTIAL
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly: {e}")
        sentry_sdk.capture_exception(error=e)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_PARTIAL


def start():
    init_sentry()
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    start()
