import logging
import shlex
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from segperf.calibration import (
    CalibrationArtifact,
    build_artifact,
    collect_pairs,
    save_artifact,
)
from segperf.config import RunConfig, SyntheticConfig, run_timestamp
from segperf.dataset import DatasetSplit, Image, resize_all
from segperf.errors import CalibrationError, ValidationError
from segperf.estimator import (
    EstimationResult,
    estimate_unlabeled,
    resolve_protocol,
    save_estimate,
    unlabeled_pseudo,
)
from segperf.fs import load_dataset, write_dataset
from segperf.meta_eval import HoldoutPoint, MetaScore, ReportFiles, emit_report
from segperf.metrics import SetScore, evaluate_set
from segperf.segmenters import (
    AdapterRegistry,
    CheckpointRef,
    CheckpointSeries,
    ExternalProcessPlugin,
    ProcessAdapter,
    SegmenterPlugin,
)
from segperf.synthetic import (
    CouplingSpec,
    QualityCurve,
    SyntheticCheckpointAdapter,
    SyntheticWorld,
    build_quality_curve,
    synthetic_checkpoint,
    synthetic_reference,
    synthetic_series,
)
from segperf.types import MetricId

logger = logging.getLogger(__name__)


class PerformanceEstimator:
    """High-level view of one dataset, one reference segmenter and the models
    under test, driven by a :class:`RunConfig`."""

    def __init__(
        self,
        split: DatasetSplit,
        plugin: SegmenterPlugin,
        *,
        config: Optional[RunConfig] = None,
        adapters: Optional[AdapterRegistry] = None,
    ) -> None:
        self.split = split
        self.plugin = plugin
        self.config = config if config is not None else RunConfig()
        self.adapters = adapters if adapters is not None else AdapterRegistry()
        if self.config.model_cmd is not None and "process" not in self.adapters:
            argv = shlex.split(self.config.model_cmd)
            if not argv:
                raise ValidationError("Empty model_cmd")
            self.adapters.register(
                "process", ProcessAdapter(argv, self.config.plugin_timeout)
            )
        self.world: Optional[SyntheticWorld] = None
        self.curve: Optional[QualityCurve] = None

    @classmethod
    def from_manifest(
        cls,
        manifest: Path,
        plugin: SegmenterPlugin,
        *,
        config: Optional[RunConfig] = None,
        adapters: Optional[AdapterRegistry] = None,
    ) -> "PerformanceEstimator":
        """Load a dataset and resize every pair to the plugin's input shape."""
        config = config if config is not None else RunConfig(manifest=manifest)
        split = load_dataset(
            manifest.parent, manifest.name, rgb=config.rgb, workers=config.workers
        )
        shape = plugin.input_shape
        resized = DatasetSplit(
            *(resize_all(pairs, shape) for _, pairs in split.partitions())
        )
        return cls(resized, plugin, config=config, adapters=adapters)

    @classmethod
    def synthetic(cls, config: RunConfig) -> "PerformanceEstimator":
        """Generated world, builtin reference plugin and synthetic checkpoints."""
        settings = config.synthetic or SyntheticConfig()
        world = SyntheticWorld.generate(
            settings.n_shapes, (settings.canvas, settings.canvas), config.seed
        )
        curve = build_quality_curve(
            np.linspace(0.0, 1.0, settings.curve_levels), world.pairs, config.seed
        )
        coupling = CouplingSpec(
            settings.coupling_a,
            settings.coupling_b,
            settings.coupling_sigma,
            link=settings.coupling_link,
            support=settings.support_quality,
        )
        adapters = AdapterRegistry({"synthetic": SyntheticCheckpointAdapter(world)})
        estimator = cls(
            world.split(),
            synthetic_reference(coupling, curve, world),
            config=config,
            adapters=adapters,
        )
        estimator.world = world
        estimator.curve = curve
        return estimator

    @classmethod
    def from_config(cls, config: RunConfig) -> "PerformanceEstimator":
        if config.synthetic is not None:
            return cls.synthetic(config)
        if config.manifest is None:
            raise ValidationError("Configuration needs either a manifest or synthetic settings")
        if config.plugin_cmd is None:
            raise ValidationError("Configuration needs plugin_cmd for a manifest dataset")
        plugin = ExternalProcessPlugin.from_command_line(
            config.plugin_cmd, config.plugin_timeout
        )
        return cls.from_manifest(config.manifest, plugin, config=config)

    def _synthetic_settings(self) -> SyntheticConfig:
        return self.config.synthetic or SyntheticConfig()

    def checkpoints(self) -> CheckpointSeries:
        """Configured checkpoints, or the synthetic training run."""
        if self.config.checkpoints:
            return CheckpointSeries.of(
                CheckpointRef(c.model_id, c.epoch, c.locator, c.adapter)
                for c in self.config.checkpoints
            )
        if self.curve is None:
            raise ValidationError("Configuration lists no checkpoints")
        settings = self._synthetic_settings()
        return synthetic_series(
            settings.n_levels,
            self.split.train,
            seed=self.config.seed,
            curve=self.curve,
            quality_range=settings.quality_range,
        )

    def holdout_checkpoints(self) -> list[CheckpointRef]:
        """Unseen synthetic checkpoints, numbered after the calibration series."""
        if self.curve is None:
            return []
        settings = self._synthetic_settings()
        first = 5 * (settings.n_levels + 1)
        return [
            synthetic_checkpoint(first + 5 * i, self.curve.invert(float(q)), "holdout")
            for i, q in enumerate(np.linspace(*settings.holdout_range, settings.n_holdout))
        ]

    def deployed(self) -> CheckpointRef:
        if self.config.deployed is not None:
            d = self.config.deployed
            return CheckpointRef(d.model_id, d.epoch, d.locator, d.adapter)
        if self.curve is None:
            raise ValidationError("Configuration names no deployed checkpoint")
        level = self.curve.invert(self._synthetic_settings().deployed_quality)
        return synthetic_checkpoint(1, level, "deployed")

    def real_performance(
        self, ckpt: CheckpointRef, metric: MetricId, cohort: str = "test"
    ) -> SetScore:
        pairs = getattr(self.split, cohort)
        if not pairs:
            raise ValidationError(f"The {cohort} partition is empty")
        labels = [p.require_label() for p in pairs]
        preds = self.adapters.predict_under_test(ckpt, [p.image for p in pairs])
        return evaluate_set(metric, preds, labels)

    def calibrate(
        self,
        metric: MetricId,
        series: Optional[CheckpointSeries] = None,
        *,
        created_at: Optional[str] = None,
        toolkit_version: str = "unknown",
    ) -> CalibrationArtifact:
        cfg = self.config
        psi = collect_pairs(
            series if series is not None else self.checkpoints(),
            self.split,
            self.plugin,
            metric,
            cfg.support_size,
            cfg.n_repeats,
            cfg.seed,
            adapters=self.adapters,
            train_cap=cfg.train_cap,
            workers=cfg.workers,
        )
        return build_artifact(
            psi,
            support_size=cfg.support_size,
            n_repeats=cfg.n_repeats,
            seed=cfg.seed,
            created_at=created_at or run_timestamp(),
            family=cfg.family,
            log_linear_metrics=cfg.log_linear_metrics,
            train_cap=cfg.train_cap,
            run_config=cfg.as_dict(),
            toolkit_version=toolkit_version,
        )

    def estimate(
        self,
        artifact: CalibrationArtifact,
        deployed: Optional[CheckpointRef] = None,
        unlabeled: Optional[Sequence[Image]] = None,
        *,
        metric: Optional[MetricId] = None,
    ) -> EstimationResult:
        """Estimate ``deployed`` on ``unlabeled`` (the extra test images by default).

        The calibrated protocol is used unless the configuration sets
        ``override_protocol``.
        """
        if unlabeled is None:
            unlabeled = [p.image for p in self.split.extra_test]
        cfg = self.config
        return estimate_unlabeled(
            deployed if deployed is not None else self.deployed(),
            unlabeled,
            self.split.train,
            self.plugin,
            artifact,
            cfg.seed,
            metric=metric,
            adapters=self.adapters,
            support_size=cfg.support_size if cfg.override_protocol else None,
            n_repeats=cfg.n_repeats if cfg.override_protocol else None,
        )

    def holdout(
        self, artifact: CalibrationArtifact, checkpoints: Sequence[CheckpointRef]
    ) -> list[HoldoutPoint]:
        """(pseudo, real) on the extra test cohort for checkpoints unseen in fitting.
        Pseudo scores are left unmapped; the report decides what G makes of them."""
        extra = self.split.extra_test
        if not checkpoints:
            return []
        if not extra or any(p.label is None for p in extra):
            logger.warning("extra_test is empty or unlabeled; skipping holdout evaluation")
            return []
        cfg = self.config
        protocol = resolve_protocol(
            artifact,
            cfg.seed,
            cfg.support_size if cfg.override_protocol else None,
            cfg.n_repeats if cfg.override_protocol else None,
        )
        images = [p.image for p in extra]
        points: list[HoldoutPoint] = []
        for ckpt in checkpoints:
            real = self.real_performance(ckpt, artifact.metric, "extra_test")
            if not real.defined:
                raise CalibrationError(
                    f"holdout epoch {ckpt.epoch}: real {artifact.metric.value} is undefined"
                )
            pseudo = unlabeled_pseudo(
                ckpt, images, self.split.train, self.plugin, artifact, protocol, self.adapters
            )
            points.append(HoldoutPoint(pseudo.mean, real.mean, ckpt.epoch))
        return points


@dataclass
class MetricRun:
    artifact: CalibrationArtifact
    holdout: list[HoldoutPoint]
    report: ReportFiles
    estimate: EstimationResult


@dataclass
class DemoRun:
    seed: int
    out_dir: Path
    runs: dict[MetricId, MetricRun] = field(default_factory=dict)

    def holdout_scores(self) -> dict[MetricId, MetaScore]:
        """Holdout MetaScore per metric (calibration scores when there is no holdout)."""
        scores = {}
        for metric, run in self.runs.items():
            cohorts = run.report.scores
            scores[metric] = cohorts.get("holdout", cohorts["calibration"])
        return scores


def run_synthetic_demo(
    config: RunConfig, out_dir: Path, *, toolkit_version: str = "unknown"
) -> DemoRun:
    """generate -> series -> calibrate -> holdout estimate -> meta-eval, per metric.

    Writes the generated dataset, one artifact, report and deployed-model
    estimate per metric under ``out_dir``.
    """
    if config.synthetic is None:
        config = config.with_overrides(synthetic=SyntheticConfig())
    estimator = PerformanceEstimator.synthetic(config)
    write_dataset(estimator.split, out_dir / "dataset")
    created_at = run_timestamp()
    series = estimator.checkpoints()
    holdout_ckpts = estimator.holdout_checkpoints()
    demo = DemoRun(config.seed, out_dir)
    for metric in config.metrics:
        metric_dir = out_dir / metric.value
        artifact = estimator.calibrate(
            metric, series, created_at=created_at, toolkit_version=toolkit_version
        )
        save_artifact(artifact, metric_dir / "artifact.json")
        holdout = estimator.holdout(artifact, holdout_ckpts)
        report = emit_report(
            artifact.pair_set,
            artifact.mapping,
            holdout,
            metric_dir,
            run_config=artifact.run_config,
            toolkit_version=toolkit_version,
        )
        estimate = estimator.estimate(artifact)
        save_estimate(
            estimate,
            metric_dir / "estimate.json",
            run_config=artifact.run_config,
            toolkit_version=toolkit_version,
        )
        demo.runs[metric] = MetricRun(artifact, holdout, report, estimate)
        logger.info(
            "seed %d %s: mapping %s a=%.4f b=%.4f",
            config.seed,
            metric.value,
            artifact.mapping.family.value,
            artifact.mapping.a,
            artifact.mapping.b,
        )
    return demo
