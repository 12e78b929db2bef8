"""How well does the estimate track real performance? MAE, correlation and the
calibration report (CSV, plot and summary)."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NamedTuple, Optional

import numpy as np

from segperf.calibration import MappingFunction, PairSet
from segperf.errors import DomainError, UndefinedScoreError, ValidationError
from segperf.estimator import apply_mapping
from segperf.types import FitFamily, MetricId

CSV_HEADER = ("epoch", "phi_pseudo", "phi_real", "phi_estimated", "abs_error", "cohort")
COHORTS = ("calibration", "holdout")
CURVE_POINTS = 200

logger = logging.getLogger(__name__)


def _check_lengths(real_values: Sequence[float], estimated: Sequence[float]) -> None:
    if len(real_values) != len(estimated):
        raise ValidationError(
            f"Got {len(real_values)} real values and {len(estimated)} estimates"
        )
    if len(real_values) == 0:
        raise ValidationError("Need at least one value")


def mae(real_values: Sequence[float], estimated: Sequence[float]) -> float:
    _check_lengths(real_values, estimated)
    return math.fsum(abs(r - e) for r, e in zip(real_values, estimated)) / len(real_values)


def correlation(real_values: Sequence[float], estimated: Sequence[float]) -> float:
    """Sample Pearson correlation."""
    _check_lengths(real_values, estimated)
    if len(real_values) < 2:
        raise ValidationError("Correlation needs at least two values")
    r = np.asarray(real_values, dtype=np.float64)
    e = np.asarray(estimated, dtype=np.float64)
    if np.ptp(r) == 0.0 or np.ptp(e) == 0.0:
        raise UndefinedScoreError("Correlation is undefined for constant input")
    return float(np.clip(np.corrcoef(r, e)[0, 1], -1.0, 1.0))


@dataclass(frozen=True)
class MetaScore:
    metric: MetricId
    mae: float
    correlation: Optional[float]
    n: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "metric": self.metric.value,
            "mae": self.mae,
            "correlation": self.correlation,
            "n": self.n,
        }


def meta_score(
    metric: MetricId, real_values: Sequence[float], estimated: Sequence[float]
) -> MetaScore:
    """MAE always; correlation when it is defined (n >= 2, non-constant)."""
    corr: Optional[float]
    try:
        corr = correlation(real_values, estimated)
    except (UndefinedScoreError, ValidationError):
        corr = None
    return MetaScore(metric, mae(real_values, estimated), corr, len(real_values))


class HoldoutPoint(NamedTuple):
    phi_pseudo: float
    phi_real: float
    epoch: int = 0


class ReportRow(NamedTuple):
    """``phi_estimated`` and ``abs_error`` are None when G cannot map the pseudo score."""

    epoch: int
    phi_pseudo: float
    phi_real: float
    phi_estimated: Optional[float]
    abs_error: Optional[float]
    cohort: str

    @property
    def defined(self) -> bool:
        return self.phi_estimated is not None


@dataclass(frozen=True)
class ReportFiles:
    csv: Path
    plot: Path
    summary: Path
    scores: Mapping[str, MetaScore]


def _r6(x: float) -> float:
    return float(f"{x:.6f}")


def report_rows(
    psi: PairSet, mapping: MappingFunction, holdout: Sequence[HoldoutPoint]
) -> list[ReportRow]:
    """Rows as written to the CSV: values rounded to 6 decimals, estimates clamped
    to the metric's range, absolute error computed from the rounded values. A pseudo
    score outside the domain of G (<= 0 under log-linear) gives a row without an
    estimate."""
    rows: list[ReportRow] = []
    points = [(p.epoch, p.phi_pseudo, p.phi_real, "calibration") for p in psi.pairs]
    points += [
        (int(h.epoch) or i + 1, float(h.phi_pseudo), float(h.phi_real), "holdout")
        for i, h in enumerate(holdout)
    ]
    for epoch, pseudo, real, cohort in points:
        real6 = _r6(real)
        try:
            mapped = apply_mapping(mapping, pseudo)
        except DomainError as e:
            logger.warning("%s row at epoch %d has no estimate: %s", cohort, epoch, e)
            rows.append(ReportRow(epoch, _r6(pseudo), real6, None, None, cohort))
            continue
        estimate = _r6(psi.metric.clamp(mapped))
        rows.append(
            ReportRow(epoch, _r6(pseudo), real6, estimate, _r6(abs(real6 - estimate)), cohort)
        )
    return rows


def scores_from_rows(metric: MetricId, rows: Sequence[ReportRow]) -> dict[str, MetaScore]:
    scores: dict[str, MetaScore] = {}
    for cohort in COHORTS:
        selected = [r for r in rows if r.cohort == cohort and r.defined]
        if selected:
            scores[cohort] = meta_score(
                metric,
                [r.phi_real for r in selected],
                [r.phi_estimated for r in selected if r.phi_estimated is not None],
            )
    return scores


def _fmt6(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.6f}"


def _opt_float(text: str) -> Optional[float]:
    return float(text) if text else None


def write_report_csv(
    rows: Sequence[ReportRow], path: Path, preamble: Optional[Mapping[str, Any]] = None
) -> None:
    buf = io.StringIO()
    for key, value in (preamble or {}).items():
        buf.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow(
            (
                r.epoch,
                f"{r.phi_pseudo:.6f}",
                f"{r.phi_real:.6f}",
                _fmt6(r.phi_estimated),
                _fmt6(r.abs_error),
                r.cohort,
            )
        )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def read_report_csv(path: Path) -> list[ReportRow]:
    """Parse a report CSV, skipping ``#`` preamble lines. Empty estimate cells read as None."""
    lines = [line for line in path.read_text().splitlines() if not line.startswith("#")]
    reader = csv.reader(lines)
    header = tuple(next(reader, ()))
    if header != CSV_HEADER:
        raise ValidationError(f"Unexpected report header {header} in {path}")
    return [
        ReportRow(int(e), float(p), float(r), _opt_float(est), _opt_float(err), cohort)
        for e, p, r, est, err, cohort in reader
    ]


def _curve(psi: PairSet, mapping: MappingFunction) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = psi.pseudo_range
    if mapping.family is FitFamily.LOG_LINEAR:
        lo = max(lo, np.nextafter(0.0, 1.0))
    xs = np.linspace(lo, hi, CURVE_POINTS)
    return xs, np.array([apply_mapping(mapping, float(x)) for x in xs])


def write_report_plot(
    psi: PairSet,
    mapping: MappingFunction,
    holdout: Sequence[HoldoutPoint],
    path: Path,
    description: str = "",
) -> None:
    """Static SVG: calibration pairs, the fitted curve and holdout points."""
    import matplotlib
    from matplotlib.figure import Figure

    fig = Figure(figsize=(4.5, 4.0))
    ax = fig.add_subplot()
    ax.scatter(psi.pseudo, psi.real, s=18, color="tab:blue", label="calibration")
    xs, ys = _curve(psi, mapping)
    ax.plot(xs, ys, color="tab:red", linewidth=1.5, label=f"G(x) ({mapping.family.value})")
    if holdout:
        ax.scatter(
            [h.phi_pseudo for h in holdout],
            [h.phi_real for h in holdout],
            s=24,
            marker="D",
            color="tab:orange",
            label="holdout",
        )
    name = psi.metric.value
    ax.set_xlabel(f"pseudo {name}")
    ax.set_ylabel(f"real {name}")
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "segperf", "svg.fonttype": "none"}):
        fig.savefig(
            path,
            format="svg",
            metadata={"Date": None, "Description": description or None},
        )


def emit_report(
    psi: PairSet,
    mapping: MappingFunction,
    holdout: Sequence[HoldoutPoint],
    out_dir: Path,
    *,
    run_config: Optional[Mapping[str, Any]] = None,
    toolkit_version: str = "unknown",
) -> ReportFiles:
    """Write ``pairs.csv``, ``calibration.svg`` and ``summary.json`` to ``out_dir``."""
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"Cannot write report to {out_dir}: {e}") from e
    rows = report_rows(psi, mapping, holdout)
    scores = scores_from_rows(psi.metric, rows)
    provenance = {"toolkit_version": toolkit_version, "run_config": dict(run_config or {})}

    csv_path = out_dir / "pairs.csv"
    write_report_csv(rows, csv_path, preamble=provenance)
    plot_path = out_dir / "calibration.svg"
    write_report_plot(psi, mapping, holdout, plot_path, json.dumps(provenance, sort_keys=True))
    summary_path = out_dir / "summary.json"
    summary = {
        **provenance,
        "metric": psi.metric.value,
        "mapping": {
            "family": mapping.family.value,
            "a": mapping.a,
            "b": mapping.b,
            "residual_sse": mapping.residual_sse,
        },
        "observed_pseudo_range": list(psi.pseudo_range),
        "cohorts": {name: score.to_dict() for name, score in scores.items()},
    }
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return ReportFiles(csv_path, plot_path, summary_path, scores)
