"""Estimating real performance on an unlabeled cohort from a calibration artifact."""

from __future__ import annotations

import json
import logging
import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from segperf.calibration import (
    CalibrationArtifact,
    MappingFunction,
    PseudoPerformance,
    pseudo_performance,
)
from segperf.dataset import Image, LabeledPair
from segperf.errors import ArtifactMismatchError, DomainError, ValidationError
from segperf.segmenters import AdapterRegistry, CheckpointRef, SegmenterPlugin
from segperf.types import MAX_SUPPORT_SIZE, FitFamily, MetricId

logger = logging.getLogger(__name__)


class ExtrapolationWarning(UserWarning):
    """The pseudo-metric lies outside the range the mapping was fitted on."""


def apply_mapping(G: MappingFunction, x: float) -> float:
    if G.family is FitFamily.LOG_LINEAR:
        if not x > 0:
            raise DomainError(f"log_linear mapping is undefined at x={x}")
        return G.a * math.log(x) + G.b
    return G.a * x + G.b


@dataclass(frozen=True)
class EstimationProtocol:
    support_size: int
    n_repeats: int
    seed: int
    overridden: bool = False


@dataclass(frozen=True)
class EstimationResult:
    metric: MetricId
    phi_pseudo: float
    phi_mapped: float
    phi_estimated: float
    clamped: bool
    extrapolated: bool
    n_unlabeled: int
    pseudo_repeat_values: tuple[float, ...]
    protocol: EstimationProtocol
    deployed: CheckpointRef

    def to_dict(self) -> dict[str, object]:
        return {
            "metric": self.metric.value,
            "phi_pseudo": self.phi_pseudo,
            "phi_mapped": self.phi_mapped,
            "phi_estimated": self.phi_estimated,
            "clamped": self.clamped,
            "extrapolated": self.extrapolated,
            "n_unlabeled": self.n_unlabeled,
            "pseudo_repeat_values": list(self.pseudo_repeat_values),
            "protocol": {
                "support_size": self.protocol.support_size,
                "n_repeats": self.protocol.n_repeats,
                "seed": self.protocol.seed,
                "overridden": self.protocol.overridden,
            },
            "deployed": {
                "model_id": self.deployed.model_id,
                "epoch": self.deployed.epoch,
                "locator": self.deployed.locator,
                "adapter": self.deployed.adapter,
            },
        }


def save_estimate(
    result: EstimationResult,
    path: Path,
    *,
    run_config: Optional[Mapping[str, Any]] = None,
    toolkit_version: str = "unknown",
) -> None:
    doc = {
        **result.to_dict(),
        "run_config": dict(run_config or {}),
        "toolkit_version": toolkit_version,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n")


def estimate_from_pseudo(
    artifact: CalibrationArtifact, phi_pseudo: float
) -> tuple[float, float, bool, bool]:
    """(mapped, clamped estimate, was clamped, is extrapolated) for a pseudo value."""
    mapped = apply_mapping(artifact.mapping, phi_pseudo)
    estimate = artifact.metric.clamp(mapped)
    lo, hi = artifact.observed_pseudo_range
    extrapolated = not lo <= phi_pseudo <= hi
    if extrapolated:
        warnings.warn(
            f"pseudo {artifact.metric.value} {phi_pseudo:.4f} is outside the calibrated "
            f"range [{lo:.4f}, {hi:.4f}]",
            ExtrapolationWarning,
            stacklevel=2,
        )
    return mapped, estimate, estimate != mapped, extrapolated


def resolve_protocol(
    artifact: CalibrationArtifact,
    seed: int,
    support_size: Optional[int] = None,
    n_repeats: Optional[int] = None,
) -> EstimationProtocol:
    """The artifact's protocol, with explicit overrides applied and flagged."""
    stored = artifact.protocol
    overridden = (support_size is not None and support_size != stored.support_size) or (
        n_repeats is not None and n_repeats != stored.n_repeats
    )
    protocol = EstimationProtocol(
        support_size=support_size if support_size is not None else stored.support_size,
        n_repeats=n_repeats if n_repeats is not None else stored.n_repeats,
        seed=seed,
        overridden=overridden,
    )
    if not 1 <= protocol.support_size <= MAX_SUPPORT_SIZE:
        raise ValidationError(f"support_size must be in [1, {MAX_SUPPORT_SIZE}]")
    if overridden:
        logger.warning("estimation protocol overrides the calibrated one: %s", protocol)
    return protocol


def unlabeled_pseudo(
    deployed: CheckpointRef,
    unlabeled: Sequence[Image],
    train_pairs: Sequence[LabeledPair],
    plugin: SegmenterPlugin,
    artifact: CalibrationArtifact,
    protocol: EstimationProtocol,
    adapters: Optional[AdapterRegistry] = None,
) -> PseudoPerformance:
    """Pseudo score of ``deployed`` on ``unlabeled``, before any mapping."""
    adapters = adapters if adapters is not None else AdapterRegistry()
    preds = adapters.predict_under_test(deployed, unlabeled)
    pool = [
        LabeledPair(id=f"ext{i:04d}", image=img, label=mask)
        for i, (img, mask) in enumerate(zip(unlabeled, preds))
    ]
    train = list(train_pairs)
    if artifact.protocol.train_cap is not None:
        train = train[: artifact.protocol.train_cap]
    return pseudo_performance(
        pool,
        train,
        plugin,
        artifact.metric,
        support_size=protocol.support_size,
        n_repeats=protocol.n_repeats,
        seed=protocol.seed,
        stage="estimate",
        key=deployed.epoch,
        source=deployed,
    )


def estimate_unlabeled(
    deployed: CheckpointRef,
    unlabeled: Sequence[Image],
    train_pairs: Sequence[LabeledPair],
    plugin: SegmenterPlugin,
    artifact: CalibrationArtifact,
    seed: int,
    *,
    metric: Optional[MetricId] = None,
    adapters: Optional[AdapterRegistry] = None,
    support_size: Optional[int] = None,
    n_repeats: Optional[int] = None,
) -> EstimationResult:
    """Estimate ``deployed``'s real performance on ``unlabeled`` images.

    The support size and repeat count default to the artifact's protocol;
    passing either explicitly overrides it and is recorded in the result.
    """
    if metric is not None and metric is not artifact.metric:
        raise ArtifactMismatchError(
            f"Artifact was calibrated for {artifact.metric.value}, not {metric.value}"
        )
    if not unlabeled:
        raise ValidationError("No unlabeled images given")
    if not train_pairs:
        raise ValidationError("No labeled training pairs given")
    for p in train_pairs:
        p.require_label()

    protocol = resolve_protocol(artifact, seed, support_size, n_repeats)
    pseudo = unlabeled_pseudo(
        deployed, unlabeled, train_pairs, plugin, artifact, protocol, adapters
    )
    mapped, estimate, clamped, extrapolated = estimate_from_pseudo(artifact, pseudo.mean)
    if clamped:
        logger.warning(
            "estimate %.4f clamped to %.4f (%s range)", mapped, estimate, artifact.metric.value
        )
    return EstimationResult(
        metric=artifact.metric,
        phi_pseudo=pseudo.mean,
        phi_mapped=mapped,
        phi_estimated=estimate,
        clamped=clamped,
        extrapolated=extrapolated,
        n_unlabeled=len(unlabeled),
        pseudo_repeat_values=pseudo.repeats,
        protocol=protocol,
        deployed=deployed,
    )
