#!/usr/bin/env python3
import logging

from segperf.cli import main
from segperf.api import PerformanceEstimator, run_synthetic_demo
from segperf.calibration import (
    CalibrationArtifact,
    MappingFunction,
    PairSet,
    PerformancePair,
    collect_pairs,
    fit_mapping,
    load_artifact,
    save_artifact,
    select_family,
)
from segperf.config import RunConfig, load_run_config
from segperf.dataset import BinaryMask, DatasetSplit, Image, LabeledPair, Volume
from segperf.errors import SegperfError
from segperf.estimator import EstimationResult, apply_mapping, estimate_unlabeled
from segperf.meta_eval import MetaScore, correlation, emit_report, mae
from segperf.metrics import MetricValue, SetScore, compute, evaluate_set
from segperf.segmenters import (
    CheckpointRef,
    CheckpointSeries,
    ExternalProcessPlugin,
    SegmenterPlugin,
    SupportSet,
)
from segperf.types import FitFamily, MetricId

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = [
    "main",
    "PerformanceEstimator",
    "run_synthetic_demo",
    "CalibrationArtifact",
    "MappingFunction",
    "PairSet",
    "PerformancePair",
    "collect_pairs",
    "fit_mapping",
    "load_artifact",
    "save_artifact",
    "select_family",
    "RunConfig",
    "load_run_config",
    "BinaryMask",
    "DatasetSplit",
    "Image",
    "LabeledPair",
    "Volume",
    "SegperfError",
    "EstimationResult",
    "apply_mapping",
    "estimate_unlabeled",
    "MetaScore",
    "correlation",
    "emit_report",
    "mae",
    "MetricValue",
    "SetScore",
    "compute",
    "evaluate_set",
    "CheckpointRef",
    "CheckpointSeries",
    "ExternalProcessPlugin",
    "SegmenterPlugin",
    "SupportSet",
    "FitFamily",
    "MetricId",
]

if __name__ == "__main__":
    raise SystemExit(main())
