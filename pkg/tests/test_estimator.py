import json
import math
import warnings
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from segperf.calibration import (
    CalibrationArtifact,
    MappingFunction,
    PairSet,
    build_artifact,
    collect_pairs,
)
from segperf.errors import ArtifactMismatchError, DomainError, ValidationError
from segperf.estimator import (
    EstimationResult,
    ExtrapolationWarning,
    apply_mapping,
    estimate_from_pseudo,
    estimate_unlabeled,
    resolve_protocol,
    save_estimate,
    unlabeled_pseudo,
)
from segperf.metrics import evaluate_set
from segperf.segmenters import AdapterRegistry
from segperf.synthetic import (
    CouplingSpec,
    QualityCurve,
    SyntheticCheckpointAdapter,
    SyntheticWorld,
    synthetic_checkpoint,
    synthetic_reference,
    synthetic_series,
)
from segperf.types import FitFamily, MetricId


def _artifact(
    pseudo: list[float], real: list[float], metric: MetricId = MetricId.DICE
) -> CalibrationArtifact:
    return build_artifact(
        PairSet.from_values(metric, pseudo, real),
        support_size=8,
        n_repeats=2,
        seed=0,
        created_at="2024-01-01T00:00:00Z",
    )


def test_apply_mapping() -> None:
    assert apply_mapping(MappingFunction(FitFamily.LINEAR, 2.0, 0.5), 0.25) == 1.0
    log = MappingFunction(FitFamily.LOG_LINEAR, 2.0, 1.0)
    assert apply_mapping(log, math.e) == pytest.approx(3.0)
    with pytest.raises(DomainError):
        apply_mapping(log, 0.0)


@pytest.mark.parametrize("family", list(FitFamily))
@pytest.mark.parametrize("a, b", [(0.1, 0.0), (1.0, -2.0), (7.5, 3.0)])
def test_apply_mapping_rises_with_positive_slope(family: FitFamily, a: float, b: float) -> None:
    G = MappingFunction(family, a, b)
    mapped = [apply_mapping(G, float(x)) for x in np.linspace(0.01, 50.0, 200)]
    assert all(lo < hi for lo, hi in zip(mapped, mapped[1:]))


def test_identity_mapping_returns_pseudo() -> None:
    artifact = _artifact([0.2, 0.5, 0.9], [0.2, 0.5, 0.9])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        mapped, estimate, clamped, extrapolated = estimate_from_pseudo(artifact, 0.61)
    assert estimate == pytest.approx(0.61)
    assert mapped == estimate
    assert not clamped and not extrapolated


def test_extrapolation_warns() -> None:
    artifact = _artifact([0.2, 0.5, 0.9], [0.2, 0.5, 0.9])
    with pytest.warns(ExtrapolationWarning, match="outside the calibrated range"):
        *_, extrapolated = estimate_from_pseudo(artifact, 0.95)
    assert extrapolated


def test_estimate_is_clamped_to_metric_range() -> None:
    artifact = _artifact([0.2, 0.4], [0.4, 0.8])
    mapped, estimate, clamped, _ = estimate_from_pseudo(artifact, 0.4)
    assert estimate == pytest.approx(0.8) and not clamped
    with pytest.warns(ExtrapolationWarning):
        mapped, estimate, clamped, _ = estimate_from_pseudo(artifact, 0.7)
    assert mapped == pytest.approx(1.4)
    assert estimate == 1.0 and clamped


def test_hd95_estimate_is_not_clamped_above() -> None:
    artifact = _artifact([2.0, 4.0], [5.0, 15.0], MetricId.HD95)
    with pytest.warns(ExtrapolationWarning):
        mapped, estimate, clamped, _ = estimate_from_pseudo(artifact, 30.0)
    assert estimate == mapped == pytest.approx(145.0)
    assert not clamped
    with pytest.warns(ExtrapolationWarning):
        _, estimate, clamped, _ = estimate_from_pseudo(artifact, 0.0)
    assert estimate == 0.0 and clamped


@pytest.fixture(scope="module")
def calibrated(world: SyntheticWorld, curve: QualityCurve) -> CalibrationArtifact:
    split = world.split()
    psi = collect_pairs(
        synthetic_series(6, split.validation, seed=0, curve=curve),
        split,
        synthetic_reference(CouplingSpec(0.9, 0.05, 0.01), curve, world),
        MetricId.DICE,
        support_size=16,
        n_repeats=3,
        seed=0,
        adapters=AdapterRegistry({"synthetic": SyntheticCheckpointAdapter(world)}),
        train_cap=40,
    )
    return build_artifact(
        psi,
        support_size=16,
        n_repeats=3,
        seed=0,
        created_at="2024-01-01T00:00:00Z",
        train_cap=40,
    )


def _estimate(
    world: SyntheticWorld, curve: QualityCurve, artifact: CalibrationArtifact, **kwargs: Any
) -> EstimationResult:
    split = world.split()
    return estimate_unlabeled(
        synthetic_checkpoint(1, curve.invert(0.7)),
        [p.image for p in split.extra_test],
        split.train,
        synthetic_reference(CouplingSpec(0.9, 0.05, 0.01), curve, world),
        artifact,
        seed=0,
        adapters=AdapterRegistry({"synthetic": SyntheticCheckpointAdapter(world)}),
        **kwargs,
    )


def test_estimate_unlabeled_tracks_real_performance(
    world: SyntheticWorld, curve: QualityCurve, calibrated: CalibrationArtifact
) -> None:
    result = _estimate(world, curve, calibrated)
    extra = world.split().extra_test
    adapter = SyntheticCheckpointAdapter(world)
    preds = adapter.predict(result.deployed, [p.image for p in extra])
    real = evaluate_set(MetricId.DICE, preds, [p.require_label() for p in extra]).mean
    assert abs(result.phi_estimated - real) <= 0.05
    assert result.n_unlabeled == len(extra)
    assert len(result.pseudo_repeat_values) == 3
    assert not result.protocol.overridden
    assert result == _estimate(world, curve, calibrated)


def test_estimate_protocol_override_is_recorded(
    world: SyntheticWorld, curve: QualityCurve, calibrated: CalibrationArtifact
) -> None:
    result = _estimate(world, curve, calibrated, support_size=4, n_repeats=1)
    assert result.protocol.overridden
    assert result.protocol.support_size == 4
    assert len(result.pseudo_repeat_values) == 1
    # restating the stored protocol is not an override
    assert not _estimate(world, curve, calibrated, support_size=16).protocol.overridden


def test_pseudo_before_mapping_matches_the_estimate(
    world: SyntheticWorld, curve: QualityCurve, calibrated: CalibrationArtifact
) -> None:
    split = world.split()
    protocol = resolve_protocol(calibrated, 0)
    assert (protocol.support_size, protocol.n_repeats, protocol.overridden) == (16, 3, False)
    pseudo = unlabeled_pseudo(
        synthetic_checkpoint(1, curve.invert(0.7)),
        [p.image for p in split.extra_test],
        split.train,
        synthetic_reference(CouplingSpec(0.9, 0.05, 0.01), curve, world),
        calibrated,
        protocol,
        AdapterRegistry({"synthetic": SyntheticCheckpointAdapter(world)}),
    )
    result = _estimate(world, curve, calibrated)
    assert pseudo.mean == result.phi_pseudo
    assert pseudo.repeats == result.pseudo_repeat_values
    with pytest.raises(ValidationError, match="support_size"):
        resolve_protocol(calibrated, 0, support_size=65)


def test_estimate_validation(
    world: SyntheticWorld, curve: QualityCurve, calibrated: CalibrationArtifact
) -> None:
    with pytest.raises(ArtifactMismatchError, match="jaccard"):
        _estimate(world, curve, calibrated, metric=MetricId.JACCARD)
    assert ArtifactMismatchError("x").exit_code == 4
    split = world.split()
    plugin = synthetic_reference(CouplingSpec(), curve, world)
    with pytest.raises(ValidationError, match="unlabeled"):
        estimate_unlabeled(synthetic_checkpoint(1, 0.0), [], split.train, plugin, calibrated, 0)
    with pytest.raises(ValidationError, match="training"):
        estimate_unlabeled(
            synthetic_checkpoint(1, 0.0), [split.test[0].image], [], plugin, calibrated, 0
        )


def test_save_estimate(
    world: SyntheticWorld,
    curve: QualityCurve,
    calibrated: CalibrationArtifact,
    tmp_path: Path,
) -> None:
    result = _estimate(world, curve, calibrated)
    save_estimate(
        result, tmp_path / "estimate.json", run_config={"seed": 0}, toolkit_version="0.3.0"
    )
    doc = json.loads((tmp_path / "estimate.json").read_text())
    assert doc["metric"] == "dice"
    assert doc["phi_estimated"] == result.phi_estimated
    assert doc["deployed"]["adapter"] == "synthetic"
    assert doc["run_config"] == {"seed": 0}
    assert doc["toolkit_version"] == "0.3.0"
