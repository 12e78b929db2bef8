import argparse
import csv
import json
import logging
import sys
from collections.abc import Callable
from importlib import metadata
from pathlib import Path
from typing import Any, Optional, Sequence

from segperf.api import PerformanceEstimator, run_synthetic_demo
from segperf.calibration import load_artifact, save_artifact
from segperf.config import RunConfig, load_run_config, workers_from_env
from segperf.dataset import resize_image
from segperf.errors import (
    ArtifactMismatchError,
    SegperfError,
    UndefinedScoreError,
    ValidationError,
)
from segperf.estimator import save_estimate
from segperf.fs import read_image_dir, read_mask_dir
from segperf.meta_eval import MetaScore, emit_report
from segperf.metrics import SetScore, evaluate_set
from segperf.output import print_estimate, print_meta_table, print_metric_summary
from segperf.types import MetricId

logger = logging.getLogger(__name__)

try:
    PKG_VERSION = metadata.version("segperf")
except metadata.PackageNotFoundError:
    PKG_VERSION = "unknown"


def _load_config(args: argparse.Namespace) -> RunConfig:
    """Configuration file (if any) with command-line flags on top."""
    config = load_run_config(args.config) if args.config is not None else RunConfig()
    metrics = tuple(MetricId.parse(m) for m in args.metric) if args.metric else None
    return config.with_overrides(
        seed=args.seed,
        metrics=metrics,
        support_size=args.support_size,
        n_repeats=args.repeats,
        plugin_cmd=args.plugin_cmd,
        out=args.out,
        workers=workers_from_env(),
    )


def _print_kwargs(args: argparse.Namespace) -> dict[str, Any]:
    return {
        "output": args.output,
        "colormap": getattr(args, "colormap", "viridis"),
        "latex_enable_color": getattr(args, "latex_enable_color", False),
    }


def _write_per_image_csv(
    path: Path, ids: Sequence[str], score: SetScore, config: RunConfig
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        f.write(f"# toolkit_version: {json.dumps(PKG_VERSION)}\n")
        f.write(f"# run_config: {json.dumps(config.as_dict(), sort_keys=True)}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("id", score.metric.value))
        for pair_id, value in zip(ids, score.per_image):
            writer.writerow((pair_id, f"{value.value:.6f}" if value.defined else ""))


# ---------------------------------------------------------------------------
# CLI entrypoints (delegate to API + print)
# ---------------------------------------------------------------------------


def cmd_metrics(args: argparse.Namespace) -> int:
    config = _load_config(args)
    preds = read_mask_dir(args.pred_dir)
    gts = read_mask_dir(args.gt_dir)
    only_pred = sorted(set(preds) - set(gts))
    only_gt = sorted(set(gts) - set(preds))
    if only_pred or only_gt:
        lines = [f"only in {args.pred_dir}: {name}" for name in only_pred]
        lines += [f"only in {args.gt_dir}: {name}" for name in only_gt]
        raise ValidationError("Unmatched filenames:\n" + "\n".join(lines))
    if not preds:
        raise ValidationError(f"No masks found in {args.pred_dir}")

    ids = sorted(preds)
    scores: dict[MetricId, SetScore] = {}
    for metric in config.metrics:
        score = evaluate_set(metric, [preds[i] for i in ids], [gts[i] for i in ids])
        _write_per_image_csv(config.out / f"{metric.value}.csv", ids, score, config)
        scores[metric] = score
    print_metric_summary(scores, **_print_kwargs(args))
    undefined = [m.value for m, s in scores.items() if not s.defined]
    if undefined:
        raise UndefinedScoreError(f"Set score undefined for: {', '.join(undefined)}")
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    estimator = PerformanceEstimator.from_config(config)
    series = estimator.checkpoints()
    holdout_ckpts = estimator.holdout_checkpoints()
    table: dict[str, dict[MetricId, MetaScore]] = {}
    for metric in config.metrics:
        artifact = estimator.calibrate(metric, series, toolkit_version=PKG_VERSION)
        metric_dir = config.out / metric.value
        save_artifact(artifact, metric_dir / "artifact.json")
        report = emit_report(
            artifact.pair_set,
            artifact.mapping,
            estimator.holdout(artifact, holdout_ckpts),
            metric_dir,
            run_config=artifact.run_config,
            toolkit_version=PKG_VERSION,
        )
        for cohort, score in report.scores.items():
            table.setdefault(cohort, {})[metric] = score
        m = artifact.mapping
        logger.info(
            "%s: wrote %s, %s fit a=%.6f b=%.6f over %d checkpoints",
            metric.value,
            metric_dir / "artifact.json",
            m.family.value,
            m.a,
            m.b,
            artifact.pair_set.K,
        )
    print_meta_table(table, summary_rows=False, **_print_kwargs(args))
    return 0


def cmd_estimate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    artifact = load_artifact(args.artifact)
    requested = (
        [MetricId.parse(m) for m in args.metric]
        if args.metric
        else (list(config.metrics) if args.config is not None else [])
    )
    if requested and artifact.metric not in requested:
        raise ArtifactMismatchError(
            f"Artifact {args.artifact} was calibrated for {artifact.metric.value}, "
            f"requested {', '.join(m.value for m in requested)}"
        )
    estimator = PerformanceEstimator.from_config(config)
    unlabeled = None
    if args.unlabeled is not None:
        images = read_image_dir(args.unlabeled, config.rgb)
        if not images:
            raise ValidationError(f"No images found in {args.unlabeled}")
        shape = estimator.plugin.input_shape
        unlabeled = [resize_image(images[k], shape) for k in sorted(images)]
    result = estimator.estimate(artifact, unlabeled=unlabeled)
    save_estimate(
        result,
        config.out / "estimate.json",
        run_config=config.as_dict(),
        toolkit_version=PKG_VERSION,
    )
    print_estimate(result, output=args.output)
    return 0


def cmd_synth_demo(args: argparse.Namespace) -> int:
    config = _load_config(args)
    if args.seeds < 1:
        raise ValidationError(f"--seeds must be >= 1, got {args.seeds}")
    table: dict[str, dict[MetricId, MetaScore]] = {}
    for offset in range(args.seeds):
        seed = config.seed + offset
        out_dir = config.out if args.seeds == 1 else config.out / f"seed-{seed}"
        demo = run_synthetic_demo(
            config.with_overrides(seed=seed), out_dir, toolkit_version=PKG_VERSION
        )
        table[f"seed {seed}"] = demo.holdout_scores()
    print_meta_table(table, **_print_kwargs(args))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segperf",
        description=(
            "Estimate segmentation performance on unlabeled data from a reverse "
            "pseudo-metric calibrated against real performance."
        ),
    )

    parser.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s {PKG_VERSION}",
    )
    parser.add_argument(
        "--config",
        type=Path,
        metavar="FILE",
        help="Run configuration (YAML or JSON). Command-line flags override it.",
    )
    parser.add_argument("--seed", type=int, help="Root seed for all randomness.")
    parser.add_argument(
        "--metric",
        action="append",
        metavar="NAME",
        help=(
            "Metric to use: dice, hd95, jaccard, pearson, recall or precision. "
            "Can be specified multiple times."
        ),
    )
    parser.add_argument(
        "--support-size", type=int, metavar="N", help="Support set size (at most 64)."
    )
    parser.add_argument(
        "--repeats", type=int, metavar="N", help="Support draws averaged per pseudo-metric."
    )
    parser.add_argument(
        "--plugin-cmd",
        metavar="CMD",
        help="Reference segmenter command; invoked as CMD <workdir>.",
    )
    parser.add_argument("--out", type=Path, metavar="DIR", help="Output directory.")
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="Log progress at INFO level."
    )
    parser.add_argument("-q", "--quiet", action="store_true", help="Log errors only.")
    parser.add_argument(
        "--output",
        "-o",
        choices=["stdout", "csv", "latex"],
        metavar="FORMAT",
        default="stdout",
        help=(
            "Output format: stdout (default) for plain text, csv for CSV, "
            'latex for LaTeX tabular (requires "latex" optional dependencies)'
        ),
    )
    parser.add_argument(
        "--latex-enable-color",
        action="store_true",
        help=(
            "Enable background colors for LaTeX tables when using --output latex. "
            "Requires \\usepackage[table]{xcolor}."
        ),
    )
    parser.add_argument(
        "--latex-colormap",
        dest="colormap",
        metavar="NAME",
        default="viridis",
        help=(
            "Matplotlib colormap name to use for colored LaTeX output "
            "(e.g. viridis, plasma, magma, inferno). Default: viridis."
        ),
    )

    subparsers = parser.add_subparsers(
        title="subcommands",
        dest="command",
        metavar="command",
    )

    p_metrics = subparsers.add_parser(
        "metrics",
        help="Score predicted masks against ground-truth masks matched by filename.",
    )
    p_metrics.add_argument("pred_dir", type=Path, help="Directory of predicted masks.")
    p_metrics.add_argument("gt_dir", type=Path, help="Directory of ground-truth masks.")
    p_metrics.set_defaults(func=cmd_metrics)

    p_calibrate = subparsers.add_parser(
        "calibrate",
        help=(
            "Collect (pseudo, real) pairs over a checkpoint series, fit the mapping "
            "and write the calibration artifact and report."
        ),
    )
    p_calibrate.set_defaults(func=cmd_calibrate)

    p_estimate = subparsers.add_parser(
        "estimate",
        help="Estimate the deployed model's performance on unlabeled images.",
    )
    p_estimate.add_argument(
        "--artifact", type=Path, required=True, help="Calibration artifact (JSON)."
    )
    p_estimate.add_argument(
        "--unlabeled",
        type=Path,
        metavar="DIR",
        help="Directory of unlabeled images (default: the extra_test partition).",
    )
    p_estimate.set_defaults(func=cmd_estimate)

    p_demo = subparsers.add_parser(
        "synth-demo",
        help="Run the whole pipeline on generated data and print MAE/Corr.",
    )
    p_demo.add_argument(
        "--seeds",
        type=int,
        default=1,
        metavar="N",
        help="Repeat with N consecutive seeds and add Mean/STD rows.",
    )
    p_demo.set_defaults(func=cmd_synth_demo)

    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.WARNING
    if args.verbose:
        level = logging.INFO
    if args.quiet:
        level = logging.ERROR
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    func: Optional[Callable[[argparse.Namespace], int]] = getattr(args, "func", None)
    if func is None:
        # No subcommand was provided; show help and return a non-zero exit code
        parser.print_help()
        return 1
    _configure_logging(args)
    try:
        return func(args)
    except SegperfError as e:
        print(f"error[{e.kind}]: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error[file-not-found]: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        print(f"error[internal]: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
