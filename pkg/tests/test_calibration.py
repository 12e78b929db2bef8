import json
import math
from pathlib import Path

import numpy as np
import pytest

from segperf.calibration import (
    SCHEMA_VERSION,
    CalibrationArtifact,
    PairSet,
    PerformancePair,
    artifact_from_dict,
    artifact_to_dict,
    build_artifact,
    collect_pairs,
    compare_families,
    dumps_artifact,
    fit_mapping,
    load_artifact,
    sample_support,
    save_artifact,
    select_family,
)
from segperf.dataset import BinaryMask, DatasetSplit, LabeledPair
from segperf.errors import ArtifactError, CalibrationError, FitError, ValidationError
from segperf.segmenters import AdapterRegistry, CheckpointRef
from segperf.synthetic import (
    CouplingSpec,
    QualityCurve,
    SyntheticCheckpointAdapter,
    SyntheticWorld,
    synthetic_reference,
    synthetic_series,
)
from segperf.types import FitFamily, MetricId


def _sse(x: np.ndarray, y: np.ndarray, a: float, b: float) -> float:
    r = y - (a * x + b)
    return float(np.dot(r, r))


def _random_pair_set(rng: np.random.Generator) -> PairSet:
    k = int(rng.integers(2, 30))
    pseudo = rng.uniform(0.05, 0.95, size=k)
    real = np.clip(rng.uniform(0.2, 1.5) * pseudo + rng.normal(0, 0.05, size=k), 0, 1)
    return PairSet.from_values(MetricId.DICE, pseudo.tolist(), real.tolist())


def test_fit_matches_normal_equations() -> None:
    rng = np.random.default_rng(7)
    for _ in range(100):
        psi = _random_pair_set(rng)
        fit = fit_mapping(psi)
        design = np.column_stack([psi.pseudo, np.ones(psi.K)])
        (a, b), *_ = np.linalg.lstsq(design, psi.real, rcond=None)
        assert fit.a == pytest.approx(a, abs=1e-9)
        assert fit.b == pytest.approx(b, abs=1e-9)
        assert fit.residual_sse == pytest.approx(_sse(psi.pseudo, psi.real, a, b), abs=1e-9)


def test_fit_is_a_least_squares_minimum() -> None:
    rng = np.random.default_rng(8)
    for _ in range(100):
        psi = _random_pair_set(rng)
        fit = fit_mapping(psi)
        for da, db in ((1e-3, 0), (-1e-3, 0), (0, 1e-3), (0, -1e-3)):
            assert _sse(psi.pseudo, psi.real, fit.a + da, fit.b + db) >= fit.residual_sse


def test_fit_follows_an_affine_change_of_real_scale() -> None:
    rng = np.random.default_rng(9)
    for _ in range(20):
        pseudo = rng.uniform(1.0, 20.0, size=12)
        real = rng.uniform(0.5, 30.0, size=12)
        alpha, beta = rng.uniform(0.1, 5.0), rng.uniform(0.0, 10.0)
        fit = fit_mapping(PairSet.from_values(MetricId.HD95, pseudo.tolist(), real.tolist()))
        moved = fit_mapping(
            PairSet.from_values(MetricId.HD95, pseudo.tolist(), (alpha * real + beta).tolist())
        )
        for x in (0.0, 5.0, 17.5):
            assert moved.a * x + moved.b == pytest.approx(
                alpha * (fit.a * x + fit.b) + beta, abs=1e-9
            )


def test_fit_two_points_is_exact() -> None:
    fit = fit_mapping(PairSet.from_values(MetricId.DICE, [0.2, 0.6], [0.3, 0.7]))
    assert fit.a == pytest.approx(1.0)
    assert fit.b == pytest.approx(0.1)
    assert fit.residual_sse == pytest.approx(0.0, abs=1e-24)


def test_fit_rejects_constant_pseudo() -> None:
    with pytest.raises(FitError, match="slope"):
        fit_mapping(PairSet.from_values(MetricId.DICE, [0.4, 0.4, 0.4], [0.1, 0.5, 0.9]))


def test_log_linear_fit() -> None:
    pseudo = [2.0, 4.0, 8.0, 16.0]
    real = [3 * math.log(x) + 1 for x in pseudo]
    psi = PairSet.from_values(MetricId.HD95, pseudo, real)
    fit = fit_mapping(psi, FitFamily.LOG_LINEAR)
    assert fit.a == pytest.approx(3.0) and fit.b == pytest.approx(1.0)
    assert select_family(psi, MetricId.HD95) is FitFamily.LOG_LINEAR
    # only metrics listed as log-linear candidates get the log fit
    assert select_family(psi, MetricId.HD95, log_linear_metrics=()) is FitFamily.LINEAR


def test_select_family_prefers_linear() -> None:
    pseudo = [1.0, 2.0, 3.0, 4.0]
    psi = PairSet.from_values(MetricId.HD95, pseudo, [2 * x for x in pseudo])
    assert set(compare_families(psi, MetricId.HD95)) == {FitFamily.LINEAR, FitFamily.LOG_LINEAR}
    assert select_family(psi, MetricId.HD95) is FitFamily.LINEAR


def test_log_linear_needs_positive_pseudo() -> None:
    psi = PairSet.from_values(MetricId.HD95, [0.0, 2.0, 4.0], [1.0, 2.0, 3.0])
    with pytest.raises(FitError, match="epochs: \\[1\\]"):
        fit_mapping(psi, FitFamily.LOG_LINEAR)
    assert set(compare_families(psi, MetricId.HD95)) == {FitFamily.LINEAR}


def test_pair_set_validation() -> None:
    with pytest.raises(ValidationError):
        PairSet.from_values(MetricId.DICE, [0.5], [0.5])
    with pytest.raises(ValidationError):
        PairSet.from_values(MetricId.DICE, [0.5, 0.6], [0.5])
    with pytest.raises(ValidationError, match="unique"):
        PairSet.from_values(MetricId.DICE, [0.5, 0.6], [0.5, 0.6], epochs=[3, 3])
    with pytest.raises(ValidationError, match="range"):
        PairSet.from_values(MetricId.DICE, [0.5, 1.2], [0.5, 0.6])
    with pytest.raises(ValidationError, match="mean"):
        PerformancePair(1, 0.5, 0.5, (0.4, 0.8))
    with pytest.raises(ValidationError):
        PerformancePair(1, 0.5, 0.5, ())


def test_sample_support(world: SyntheticWorld) -> None:
    pool = world.pairs[:40]
    ids = [p.id for p in sample_support(pool, 8, 0, "calibrate", 5, 0).pairs]
    assert len(set(ids)) == 8
    assert ids == [p.id for p in sample_support(pool, 8, 0, "calibrate", 5, 0).pairs]
    assert ids != [p.id for p in sample_support(pool, 8, 0, "calibrate", 5, 1).pairs]
    assert len(sample_support(pool[:3], 8, 0, "calibrate").pairs) == 3
    with pytest.raises(ValidationError):
        sample_support([], 8, 0, "calibrate")
    with pytest.raises(ValidationError):
        sample_support(pool, 65, 0, "calibrate")
    source = CheckpointRef("m", 5, "0.3", "synthetic")
    assert sample_support(pool, 8, 0, "calibrate", source=source).source == source


def _collect(
    world: SyntheticWorld,
    curve: QualityCurve,
    coupling: CouplingSpec = CouplingSpec(0.9, 0.05, 0.01),
    n_levels: int = 4,
    **kwargs: object,
) -> PairSet:
    split = world.split()
    series = synthetic_series(n_levels, split.validation, seed=0, curve=curve)
    plugin = synthetic_reference(coupling, curve, world)
    adapters = AdapterRegistry({"synthetic": SyntheticCheckpointAdapter(world)})
    options = {"support_size": 8, "n_repeats": 2, "seed": 0, "train_cap": 30, **kwargs}
    return collect_pairs(series, split, plugin, MetricId.DICE, adapters=adapters, **options)


def test_collect_pairs(world: SyntheticWorld, curve: QualityCurve) -> None:
    psi = _collect(world, curve)
    assert psi.K == 4
    assert [p.epoch for p in psi.pairs] == [5, 10, 15, 20]
    assert all(len(p.pseudo_repeat_values) == 2 for p in psi.pairs)
    assert psi.real[-1] > psi.real[0]
    assert psi.pseudo[-1] > psi.pseudo[0]


def test_collect_pairs_independent_of_workers(
    world: SyntheticWorld, curve: QualityCurve
) -> None:
    assert _collect(world, curve, workers=1) == _collect(world, curve, workers=4)


def test_repeats_only_average_a_noiseless_population_coupling(
    world: SyntheticWorld, curve: QualityCurve
) -> None:
    """Without coupling noise every support draw of a checkpoint segments alike,
    so one repeat and six repeats agree."""
    coupling = CouplingSpec(support="population")
    one = _collect(world, curve, coupling, n_levels=5, support_size=32, n_repeats=1)
    six = _collect(world, curve, coupling, n_levels=5, support_size=32, n_repeats=6)
    np.testing.assert_allclose(six.pseudo, one.pseudo, rtol=0, atol=1e-9)
    assert six.real.tolist() == one.real.tolist()
    assert all(len(set(p.pseudo_repeat_values)) == 1 for p in six.pairs)


def test_collect_pairs_undefined_real_score(world: SyntheticWorld, curve: QualityCurve) -> None:
    # recall is undefined on every image when the test labels are all empty
    split = world.split()
    blank = [LabeledPair(p.id, p.image, BinaryMask.empty(p.image.shape)) for p in split.test]
    series = synthetic_series(2, split.validation, seed=0, curve=curve)
    with pytest.raises(CalibrationError, match="undefined"):
        collect_pairs(
            series,
            DatasetSplit(train=split.train, test=blank),
            synthetic_reference(CouplingSpec(), curve, world),
            MetricId.RECALL,
            support_size=4,
            n_repeats=1,
            adapters=AdapterRegistry({"synthetic": SyntheticCheckpointAdapter(world)}),
        )


def _artifact(metric: MetricId = MetricId.DICE) -> CalibrationArtifact:
    psi = PairSet.from_values(metric, [0.3, 0.5, 0.7], [0.35, 0.55, 0.8], epochs=[5, 10, 15])
    return build_artifact(
        psi,
        support_size=32,
        n_repeats=6,
        seed=0,
        created_at="2024-01-01T00:00:00Z",
        run_config={"seed": 0},
        toolkit_version="0.3.0",
    )


def test_artifact_round_trip(tmp_path: Path) -> None:
    artifact = _artifact()
    assert artifact.observed_pseudo_range == (0.3, 0.7)
    assert set(artifact.family_residuals) == {FitFamily.LINEAR}
    save_artifact(artifact, tmp_path / "a" / "artifact.json")
    again = load_artifact(tmp_path / "a" / "artifact.json")
    assert again == artifact
    assert dumps_artifact(again) == (tmp_path / "a" / "artifact.json").read_text()


def test_forced_family_is_recorded() -> None:
    psi = PairSet.from_values(MetricId.HD95, [1.0, 2.0, 3.0], [2.0, 4.0, 6.0])
    artifact = build_artifact(
        psi,
        support_size=8,
        n_repeats=1,
        seed=0,
        created_at="2024-01-01T00:00:00Z",
        family=FitFamily.LOG_LINEAR,
    )
    assert artifact.mapping.family is FitFamily.LOG_LINEAR
    assert set(artifact.family_residuals) == {FitFamily.LINEAR, FitFamily.LOG_LINEAR}


def test_artifact_schema_errors(tmp_path: Path) -> None:
    doc = artifact_to_dict(_artifact())
    assert doc["schema_version"] == SCHEMA_VERSION
    with pytest.raises(ArtifactError, match="schema version"):
        artifact_from_dict({**doc, "schema_version": 99})
    with pytest.raises(ArtifactError, match="metric"):
        artifact_from_dict({**doc, "metric": "accuracy"})
    with pytest.raises(ArtifactError, match="family"):
        artifact_from_dict({**doc, "mapping": {**doc["mapping"], "family": "cubic"}})
    with pytest.raises(ArtifactError, match="protocol must be a mapping"):
        artifact_from_dict({**doc, "protocol": [32, 6, 0]})
    with pytest.raises(ArtifactError, match="family_residuals"):
        artifact_from_dict({**doc, "family_residuals": ["linear"]})
    with pytest.raises(ArtifactError, match="checkpoint_hashes"):
        artifact_from_dict({**doc, "protocol": {**doc["protocol"], "checkpoint_hashes": "x"}})
    broken = dict(doc)
    del broken["mapping"]
    with pytest.raises(ArtifactError, match="Malformed"):
        artifact_from_dict(broken)
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ArtifactError):
        load_artifact(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text(json.dumps([1]))
    with pytest.raises(ArtifactError):
        load_artifact(tmp_path / "list.json")
    with pytest.raises(FileNotFoundError):
        load_artifact(tmp_path / "missing.json")


def test_artifact_lists_every_pair(tmp_path: Path) -> None:
    epochs = [5 * (i + 1) for i in range(20)]
    pseudo = [0.3 + 0.03 * i for i in range(20)]
    psi = PairSet.from_values(MetricId.DICE, pseudo, [0.9 * x + 0.05 for x in pseudo], epochs)
    artifact = build_artifact(psi, support_size=64, n_repeats=6, seed=0, created_at="x")
    save_artifact(artifact, tmp_path / "artifact.json")
    records = json.loads((tmp_path / "artifact.json").read_text())["pairs"]
    assert len(records) == 20
    assert [r["epoch"] for r in records] == epochs
