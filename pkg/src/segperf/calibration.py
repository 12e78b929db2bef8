"""Pair collection across a checkpoint series, mapping-function fitting and the
persisted calibration artifact."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections.abc import Collection, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from segperf.dataset import BinaryMask, DatasetSplit, Image, LabeledPair
from segperf.errors import (
    ArtifactError,
    CalibrationError,
    FitError,
    ValidationError,
)
from segperf.metrics import evaluate_set
from segperf.seeding import rng_for
from segperf.segmenters import (
    AdapterRegistry,
    CheckpointRef,
    CheckpointSeries,
    SegmenterPlugin,
    SupportSet,
    masks_digest,
    reference_infer,
)
from segperf.types import MAX_SUPPORT_SIZE, FitFamily, MetricId

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PerformancePair:
    epoch: int
    phi_real: float
    phi_pseudo: float
    pseudo_repeat_values: tuple[float, ...]
    checkpoint_hash: str = ""
    reference_hash: str = ""

    def __post_init__(self) -> None:
        if not self.pseudo_repeat_values:
            raise ValidationError(f"Epoch {self.epoch} has no pseudo repeat values")
        mean = math.fsum(self.pseudo_repeat_values) / len(self.pseudo_repeat_values)
        if not math.isclose(mean, self.phi_pseudo, rel_tol=1e-12, abs_tol=1e-12):
            raise ValidationError(
                f"Epoch {self.epoch}: phi_pseudo {self.phi_pseudo} is not the mean "
                f"of its repeats ({mean})"
            )


@dataclass(frozen=True)
class PairSet:
    metric: MetricId
    pairs: tuple[PerformancePair, ...]

    def __post_init__(self) -> None:
        if len(self.pairs) < 2:
            raise ValidationError(f"A pair set needs at least 2 pairs, got {len(self.pairs)}")
        epochs = [p.epoch for p in self.pairs]
        if len(set(epochs)) != len(epochs):
            raise ValidationError(f"Pair set epochs must be unique: {epochs}")
        lo, hi = self.metric.value_range
        for p in self.pairs:
            for v in (p.phi_real, p.phi_pseudo, *p.pseudo_repeat_values):
                if not lo <= v <= hi:
                    raise ValidationError(
                        f"Epoch {p.epoch}: {v} outside the {self.metric.value} range"
                    )

    @classmethod
    def from_values(
        cls,
        metric: MetricId,
        pseudo: Sequence[float],
        real: Sequence[float],
        epochs: Optional[Sequence[int]] = None,
    ) -> "PairSet":
        """Pair set with one repeat per pair, for fitting already-measured values."""
        if len(pseudo) != len(real):
            raise ValidationError("pseudo and real values differ in length")
        epochs = list(epochs) if epochs is not None else list(range(1, len(pseudo) + 1))
        return cls(
            metric,
            tuple(
                PerformancePair(int(e), float(r), float(p), (float(p),))
                for e, p, r in zip(epochs, pseudo, real)
            ),
        )

    @property
    def K(self) -> int:
        return len(self.pairs)

    @property
    def pseudo(self) -> np.ndarray:
        return np.array([p.phi_pseudo for p in self.pairs], dtype=np.float64)

    @property
    def real(self) -> np.ndarray:
        return np.array([p.phi_real for p in self.pairs], dtype=np.float64)

    @property
    def pseudo_range(self) -> tuple[float, float]:
        return (float(self.pseudo.min()), float(self.pseudo.max()))


@dataclass(frozen=True)
class MappingFunction:
    """G(x) = a*x + b (linear) or a*log(x) + b (log_linear)."""

    family: FitFamily
    a: float
    b: float
    residual_sse: float = 0.0

    def __post_init__(self) -> None:
        if self.residual_sse < 0:
            raise ValidationError(f"residual_sse must be >= 0, got {self.residual_sse}")


def fit_mapping(psi: PairSet, family: FitFamily = FitFamily.LINEAR) -> MappingFunction:
    """Ordinary least squares of phi_real on phi_pseudo (or its log), in closed form."""
    x = psi.pseudo
    y = psi.real
    if family is FitFamily.LOG_LINEAR:
        bad = [p.epoch for p in psi.pairs if p.phi_pseudo <= 0]
        if bad:
            raise FitError(f"log_linear fit needs phi_pseudo > 0; offending epochs: {bad}")
        x = np.log(x)
    x_mean = float(x.mean())
    y_mean = float(y.mean())
    dx = x - x_mean
    sxx = float(np.dot(dx, dx))
    if sxx == 0.0:
        raise FitError(f"All {psi.K} pseudo values are equal; the slope is undetermined")
    a = float(np.dot(dx, y - y_mean)) / sxx
    b = y_mean - a * x_mean
    residuals = y - (a * x + b)
    return MappingFunction(family, a, b, float(np.dot(residuals, residuals)))


def compare_families(
    psi: PairSet,
    metric: MetricId,
    log_linear_metrics: Collection[MetricId] = (MetricId.HD95,),
) -> dict[FitFamily, MappingFunction]:
    """Fit every family eligible for ``metric`` on ``psi``."""
    fits = {FitFamily.LINEAR: fit_mapping(psi, FitFamily.LINEAR)}
    if metric in log_linear_metrics and all(p.phi_pseudo > 0 for p in psi.pairs):
        fits[FitFamily.LOG_LINEAR] = fit_mapping(psi, FitFamily.LOG_LINEAR)
    return fits


def select_family(
    psi: PairSet,
    metric: MetricId,
    log_linear_metrics: Collection[MetricId] = (MetricId.HD95,),
) -> FitFamily:
    """Linear unless a log-linear fit is eligible and strictly better."""
    fits = compare_families(psi, metric, log_linear_metrics)
    log_fit = fits.get(FitFamily.LOG_LINEAR)
    if log_fit is not None and log_fit.residual_sse < fits[FitFamily.LINEAR].residual_sse:
        return FitFamily.LOG_LINEAR
    return FitFamily.LINEAR


# ---------------------------------------------------------------------------
# Pair collection
# ---------------------------------------------------------------------------


def sample_support(
    pool: Sequence[LabeledPair],
    support_size: int,
    seed: int,
    stage: str,
    *key: object,
    source: Optional[CheckpointRef] = None,
) -> SupportSet:
    """Draw min(support_size, |pool|) pairs without replacement."""
    if not pool:
        raise ValidationError("Cannot sample a support set from an empty pool")
    if not 1 <= support_size <= MAX_SUPPORT_SIZE:
        raise ValidationError(
            f"support_size must be in [1, {MAX_SUPPORT_SIZE}], got {support_size}"
        )
    size = min(support_size, len(pool))
    indices = rng_for(seed, stage, *key).choice(len(pool), size=size, replace=False)
    return SupportSet.of((pool[int(i)] for i in indices), source=source)


@dataclass(frozen=True)
class PseudoPerformance:
    mean: float
    repeats: tuple[float, ...]
    output_hash: str


def pseudo_performance(
    pool: Sequence[LabeledPair],
    reference: Sequence[LabeledPair],
    plugin: SegmenterPlugin,
    metric: MetricId,
    *,
    support_size: int,
    n_repeats: int,
    seed: int,
    stage: str,
    key: object,
    source: Optional[CheckpointRef] = None,
) -> PseudoPerformance:
    """Reverse pseudo-metric: condition ``plugin`` on ``pool`` (images with the
    model's predicted labels), segment the labeled ``reference`` images and score
    against their labels, averaged over ``n_repeats`` support draws."""
    queries = [p.image for p in reference]
    labels = [p.require_label() for p in reference]
    digest = hashlib.sha256()
    repeats: list[float] = []
    for repeat in range(n_repeats):
        support = sample_support(pool, support_size, seed, stage, key, repeat, source=source)
        outputs = reference_infer(plugin, support, queries)
        digest.update(masks_digest(outputs).encode())
        score = evaluate_set(metric, outputs, labels)
        if not score.defined:
            raise CalibrationError(
                f"{stage} {key} repeat {repeat}: pseudo {metric.value} is undefined "
                "for every reference image"
            )
        repeats.append(score.mean)
    return PseudoPerformance(
        math.fsum(repeats) / len(repeats), tuple(repeats), digest.hexdigest()
    )


def _predicted_pool(pairs: Sequence[LabeledPair], preds: Sequence[BinaryMask]) -> list[LabeledPair]:
    return [LabeledPair(p.id, p.image, m) for p, m in zip(pairs, preds)]


def _labeled(pairs: Sequence[LabeledPair], name: str) -> list[LabeledPair]:
    if not pairs:
        raise ValidationError(f"The {name} partition is empty")
    for p in pairs:
        p.require_label()
    return list(pairs)


def collect_pairs(
    series: CheckpointSeries | Iterable[CheckpointRef],
    split: DatasetSplit,
    plugin: SegmenterPlugin,
    metric: MetricId,
    support_size: int = MAX_SUPPORT_SIZE,
    n_repeats: int = 6,
    seed: int = 0,
    *,
    adapters: Optional[AdapterRegistry] = None,
    train_cap: Optional[int] = None,
    workers: int = 1,
) -> PairSet:
    """One (real, pseudo) pair per checkpoint.

    Real performance scores the checkpoint's test predictions against test
    labels. Pseudo performance conditions ``plugin`` on random subsets of the
    test images labeled with those predictions and scores its output on the
    training set. Checkpoints run in parallel on ``workers`` threads; the result
    is independent of the worker count.
    """
    if not isinstance(series, CheckpointSeries):
        series = CheckpointSeries.of(series)
    if n_repeats < 1:
        raise ValidationError(f"n_repeats must be >= 1, got {n_repeats}")
    adapters = adapters if adapters is not None else AdapterRegistry()
    test = _labeled(split.test, "test")
    train = _labeled(split.train, "train")
    if train_cap is not None:
        train = train[:train_cap]
    test_images: list[Image] = [p.image for p in test]
    test_labels = [p.require_label() for p in test]

    def _collect(ckpt: CheckpointRef) -> PerformancePair:
        preds = adapters.predict_under_test(ckpt, test_images)
        real = evaluate_set(metric, preds, test_labels)
        if not real.defined:
            raise CalibrationError(
                f"epoch {ckpt.epoch}: real {metric.value} is undefined for every test image"
            )
        pseudo = pseudo_performance(
            _predicted_pool(test, preds),
            train,
            plugin,
            metric,
            support_size=support_size,
            n_repeats=n_repeats,
            seed=seed,
            stage="calibrate",
            key=ckpt.epoch,
            source=ckpt,
        )
        logger.info(
            "epoch %d: real %s %.4f, pseudo %.4f",
            ckpt.epoch,
            metric.value,
            real.mean,
            pseudo.mean,
        )
        return PerformancePair(
            epoch=ckpt.epoch,
            phi_real=real.mean,
            phi_pseudo=pseudo.mean,
            pseudo_repeat_values=pseudo.repeats,
            checkpoint_hash=masks_digest(preds),
            reference_hash=pseudo.output_hash,
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        pairs = tuple(pool.map(_collect, series.checkpoints))
    return PairSet(metric, pairs)


# ---------------------------------------------------------------------------
# Artifact
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationProtocol:
    support_size: int
    n_repeats: int
    seed: int
    train_cap: Optional[int] = None
    checkpoint_hashes: Mapping[int, str] = field(default_factory=dict)


@dataclass(frozen=True)
class CalibrationArtifact:
    metric: MetricId
    mapping: MappingFunction
    pair_set: PairSet
    protocol: CalibrationProtocol
    created_at: str
    family_residuals: Mapping[FitFamily, float] = field(default_factory=dict)
    run_config: Mapping[str, Any] = field(default_factory=dict)
    toolkit_version: str = "unknown"

    @property
    def observed_pseudo_range(self) -> tuple[float, float]:
        return self.pair_set.pseudo_range


def build_artifact(
    psi: PairSet,
    *,
    support_size: int,
    n_repeats: int,
    seed: int,
    created_at: str,
    family: Optional[FitFamily] = None,
    log_linear_metrics: Collection[MetricId] = (MetricId.HD95,),
    train_cap: Optional[int] = None,
    run_config: Optional[Mapping[str, Any]] = None,
    toolkit_version: str = "unknown",
) -> CalibrationArtifact:
    """Fit G on ``psi`` (``family`` forces a family) and bundle it with its protocol."""
    fits = compare_families(psi, psi.metric, log_linear_metrics)
    if family is None:
        family = select_family(psi, psi.metric, log_linear_metrics)
    elif family not in fits:
        fits[family] = fit_mapping(psi, family)
    return CalibrationArtifact(
        metric=psi.metric,
        mapping=fits[family],
        pair_set=psi,
        protocol=CalibrationProtocol(
            support_size=support_size,
            n_repeats=n_repeats,
            seed=seed,
            train_cap=train_cap,
            checkpoint_hashes={p.epoch: p.checkpoint_hash for p in psi.pairs},
        ),
        created_at=created_at,
        family_residuals={f: m.residual_sse for f, m in fits.items()},
        run_config=dict(run_config or {}),
        toolkit_version=toolkit_version,
    )


def artifact_to_dict(artifact: CalibrationArtifact) -> dict[str, Any]:
    m = artifact.mapping
    p = artifact.protocol
    return {
        "schema_version": SCHEMA_VERSION,
        "toolkit_version": artifact.toolkit_version,
        "created_at": artifact.created_at,
        "metric": artifact.metric.value,
        "mapping": {
            "family": m.family.value,
            "a": m.a,
            "b": m.b,
            "residual_sse": m.residual_sse,
        },
        "family_residuals": {f.value: sse for f, sse in artifact.family_residuals.items()},
        "observed_pseudo_range": list(artifact.observed_pseudo_range),
        "protocol": {
            "support_size": p.support_size,
            "n_repeats": p.n_repeats,
            "seed": p.seed,
            "train_cap": p.train_cap,
            "checkpoint_hashes": {str(e): h for e, h in p.checkpoint_hashes.items()},
        },
        "pairs": [
            {
                "epoch": pair.epoch,
                "phi_real": pair.phi_real,
                "phi_pseudo": pair.phi_pseudo,
                "pseudo_repeat_values": list(pair.pseudo_repeat_values),
                "checkpoint_hash": pair.checkpoint_hash,
                "reference_hash": pair.reference_hash,
            }
            for pair in artifact.pair_set.pairs
        ],
        "run_config": dict(artifact.run_config),
    }


def _parse_enum(enum: Any, value: Any, what: str) -> Any:
    try:
        return enum(value)
    except ValueError:
        raise ArtifactError(f"Unknown {what} {value!r} in calibration artifact") from None


def _section(value: Any, what: str) -> Mapping[str, Any]:
    if not isinstance(value, Mapping):
        raise ArtifactError(
            f"Calibration artifact {what} must be a mapping, got {type(value).__name__}"
        )
    return value


def artifact_from_dict(doc: Mapping[str, Any]) -> CalibrationArtifact:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ArtifactError(
            f"Unsupported artifact schema version {version!r} (expected {SCHEMA_VERSION})"
        )
    try:
        metric = _parse_enum(MetricId, doc["metric"], "metric")
        mapping = _section(doc["mapping"], "mapping")
        protocol = _section(doc["protocol"], "protocol")
        hashes = _section(protocol.get("checkpoint_hashes", {}), "checkpoint_hashes")
        residuals = _section(doc.get("family_residuals", {}), "family_residuals")
        pairs = tuple(
            PerformancePair(
                epoch=int(r["epoch"]),
                phi_real=float(r["phi_real"]),
                phi_pseudo=float(r["phi_pseudo"]),
                pseudo_repeat_values=tuple(float(v) for v in r["pseudo_repeat_values"]),
                checkpoint_hash=str(r.get("checkpoint_hash", "")),
                reference_hash=str(r.get("reference_hash", "")),
            )
            for r in doc["pairs"]
        )
        return CalibrationArtifact(
            metric=metric,
            mapping=MappingFunction(
                family=_parse_enum(FitFamily, mapping["family"], "family"),
                a=float(mapping["a"]),
                b=float(mapping["b"]),
                residual_sse=float(mapping["residual_sse"]),
            ),
            pair_set=PairSet(metric, pairs),
            protocol=CalibrationProtocol(
                support_size=int(protocol["support_size"]),
                n_repeats=int(protocol["n_repeats"]),
                seed=int(protocol["seed"]),
                train_cap=protocol.get("train_cap"),
                checkpoint_hashes={int(e): str(h) for e, h in hashes.items()},
            ),
            created_at=str(doc["created_at"]),
            family_residuals={
                _parse_enum(FitFamily, f, "family"): float(sse)
                for f, sse in residuals.items()
            },
            run_config=dict(_section(doc.get("run_config", {}), "run_config")),
            toolkit_version=str(doc.get("toolkit_version", "unknown")),
        )
    except (AttributeError, KeyError, TypeError, ValueError) as e:
        if isinstance(e, ArtifactError):
            raise
        raise ArtifactError(f"Malformed calibration artifact: {e!r}") from e


def dumps_artifact(artifact: CalibrationArtifact) -> str:
    """Canonical text: sorted keys, shortest round-trip float repr."""
    return json.dumps(artifact_to_dict(artifact), indent=2, sort_keys=True, allow_nan=False) + "\n"


def save_artifact(artifact: CalibrationArtifact, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_artifact(artifact))


def load_artifact(path: Path) -> CalibrationArtifact:
    if not path.is_file():
        raise FileNotFoundError(f"Calibration artifact not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ArtifactError(f"Cannot parse calibration artifact {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ArtifactError(f"Calibration artifact {path} is not a JSON object")
    return artifact_from_dict(doc)
