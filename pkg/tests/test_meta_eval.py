import json
from pathlib import Path

import numpy as np
import pytest

from segperf.calibration import PairSet, fit_mapping
from segperf.errors import UndefinedScoreError, ValidationError
from segperf.meta_eval import (
    CSV_HEADER,
    HoldoutPoint,
    correlation,
    emit_report,
    mae,
    meta_score,
    read_report_csv,
    report_rows,
    scores_from_rows,
)
from segperf.types import FitFamily, MetricId


def test_trivial_scores() -> None:
    real = [0.2, 0.5, 0.7, 0.9]
    assert mae(real, real) == 0.0
    assert correlation(real, real) == pytest.approx(1.0)
    shifted = [r + 0.1 for r in real]
    assert mae(real, shifted) == pytest.approx(0.1)
    assert correlation(real, shifted) == pytest.approx(1.0)
    assert correlation(real, [1 - r for r in real]) == pytest.approx(-1.0)


def test_correlation_is_affine_invariant() -> None:
    rng = np.random.default_rng(3)
    real = rng.random(30).tolist()
    estimated = (np.asarray(real) + rng.normal(0, 0.1, 30)).tolist()
    base = correlation(real, estimated)
    for a, b in ((2.0, 0.0), (0.5, -3.0), (10.0, 7.0)):
        scaled = [a * e + b for e in estimated]
        assert correlation(real, scaled) == pytest.approx(base, abs=1e-12)
    assert -1.0 <= base <= 1.0


def test_mae_matches_naive_sum() -> None:
    rng = np.random.default_rng(4)
    real = rng.random(100).tolist()
    estimated = rng.random(100).tolist()
    total = 0.0
    for r, e in zip(real, estimated):
        total += abs(r - e)
    assert mae(real, estimated) == pytest.approx(total / 100, abs=1e-12)


def test_score_validation() -> None:
    with pytest.raises(ValidationError):
        mae([0.1], [0.1, 0.2])
    with pytest.raises(ValidationError):
        mae([], [])
    with pytest.raises(ValidationError):
        correlation([0.5], [0.5])
    with pytest.raises(UndefinedScoreError):
        correlation([0.5, 0.5, 0.5], [0.1, 0.2, 0.3])


def test_meta_score_leaves_undefined_correlation_empty() -> None:
    score = meta_score(MetricId.DICE, [0.5], [0.4])
    assert score.correlation is None
    assert score.mae == pytest.approx(0.1)
    assert score.to_dict() == {"metric": "dice", "mae": score.mae, "correlation": None, "n": 1}
    assert meta_score(MetricId.DICE, [0.4, 0.4], [0.3, 0.6]).correlation is None


def _pair_set(k: int = 20) -> PairSet:
    rng = np.random.default_rng(5)
    pseudo = np.sort(rng.uniform(0.3, 0.9, k))
    real = np.clip(1.1 * pseudo - 0.05 + rng.normal(0, 0.01, k), 0, 1)
    epochs = range(5, 5 * k + 1, 5)
    return PairSet.from_values(MetricId.DICE, pseudo.tolist(), real.tolist(), epochs)


def _holdout() -> list[HoldoutPoint]:
    levels = (0.4, 0.5, 0.6, 0.7, 0.8)
    return [HoldoutPoint(p, 1.1 * p - 0.04, 105 + 5 * i) for i, p in enumerate(levels)]


def test_report_rows() -> None:
    psi = _pair_set()
    mapping = fit_mapping(psi)
    rows = report_rows(psi, mapping, _holdout())
    assert len(rows) == 25
    assert [r.cohort for r in rows].count("holdout") == 5
    assert rows[0].epoch == 5 and rows[-1].epoch == 125
    for r in rows:
        assert r.abs_error == pytest.approx(abs(r.phi_real - r.phi_estimated), abs=1e-6)
        assert 0.0 <= r.phi_estimated <= 1.0


def test_report_rows_clamp_estimates() -> None:
    psi = PairSet.from_values(MetricId.DICE, [0.2, 0.4], [0.4, 0.8])
    mapping = fit_mapping(psi)
    (*_, far) = report_rows(psi, mapping, [HoldoutPoint(0.9, 0.95)])
    assert far.phi_estimated == 1.0
    assert far.epoch == 1
    assert far.abs_error == pytest.approx(0.05)


def test_report_rows_without_an_estimate(tmp_path: Path) -> None:
    pseudo = [1.0, 2.0, 4.0, 8.0]
    psi = PairSet.from_values(MetricId.HD95, pseudo, [2.0 * np.log(x) + 1.0 for x in pseudo])
    mapping = fit_mapping(psi, FitFamily.LOG_LINEAR)
    holdout = [
        HoldoutPoint(0.0, 3.0, 30),
        HoldoutPoint(3.0, 2.0 * np.log(3.0) + 1.0, 35),
        HoldoutPoint(6.0, 2.0 * np.log(6.0) + 1.5, 40),
    ]
    rows = report_rows(psi, mapping, holdout)
    undefined = [r for r in rows if not r.defined]
    assert [(r.epoch, r.phi_estimated, r.abs_error) for r in undefined] == [(30, None, None)]
    scores = scores_from_rows(MetricId.HD95, rows)
    assert scores["holdout"].n == 2
    assert scores["holdout"].mae == pytest.approx(0.25, abs=1e-5)
    assert scores["calibration"].n == 4

    files = emit_report(psi, mapping, holdout, tmp_path / "report")
    assert "30,0.000000,3.000000,,,holdout" in files.csv.read_text()
    assert read_report_csv(files.csv) == rows
    assert files.scores["holdout"].n == 2


def test_emit_report(tmp_path: Path) -> None:
    psi = _pair_set()
    mapping = fit_mapping(psi)
    files = emit_report(
        psi,
        mapping,
        _holdout(),
        tmp_path / "report",
        run_config={"seed": 0},
        toolkit_version="0.3.0",
    )
    text = files.csv.read_text()
    assert text.startswith("# toolkit_version: ")
    assert ",".join(CSV_HEADER) in text
    rows = read_report_csv(files.csv)
    assert len(rows) == 25
    again = scores_from_rows(MetricId.DICE, rows)
    for cohort in ("calibration", "holdout"):
        assert again[cohort].mae == pytest.approx(files.scores[cohort].mae, abs=1e-12)
        assert again[cohort].correlation == pytest.approx(
            files.scores[cohort].correlation, abs=1e-12
        )
    summary = json.loads(files.summary.read_text())
    assert summary["metric"] == "dice"
    assert summary["run_config"] == {"seed": 0}
    assert summary["cohorts"]["holdout"]["n"] == 5
    assert summary["mapping"]["family"] == "linear"
    svg = files.plot.read_text()
    assert "<svg" in svg


def test_emit_report_is_byte_stable(tmp_path: Path) -> None:
    psi = _pair_set()
    mapping = fit_mapping(psi)
    first = emit_report(psi, mapping, _holdout(), tmp_path / "a")
    second = emit_report(psi, mapping, _holdout(), tmp_path / "b")
    for name in ("csv", "plot", "summary"):
        a, b = getattr(first, name), getattr(second, name)
        assert a.read_bytes() == b.read_bytes()


def test_emit_report_without_holdout(tmp_path: Path) -> None:
    psi = _pair_set()
    files = emit_report(psi, fit_mapping(psi), [], tmp_path)
    assert set(files.scores) == {"calibration"}
    assert len(read_report_csv(files.csv)) == 20
    summary = json.loads(files.summary.read_text())
    assert set(summary["cohorts"]) == {"calibration"}


def test_read_report_rejects_foreign_csv(tmp_path: Path) -> None:
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValidationError, match="header"):
        read_report_csv(tmp_path / "x.csv")
