"""Output helpers for the segperf CLI."""

from __future__ import annotations

import csv
import io
import math
import statistics
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Literal, Optional

from segperf.estimator import EstimationResult
from segperf.meta_eval import MetaScore
from segperf.metrics import SetScore
from segperf.types import MetricId

OutputFormat = Literal["stdout", "csv", "latex"]


def _print_csv(rows: Iterable[Sequence[object]], printer: Callable[[str], None]) -> None:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    for line in buf.getvalue().splitlines():
        printer(line)


def _fmt(value: Optional[float], digits: int = 4) -> str:
    if value is None or math.isnan(value):
        return "n/a"
    return f"{value:.{digits}f}"


def _escape(text: str) -> str:
    try:
        from pylatex.utils import escape_latex  # type: ignore[import-untyped]
    except ImportError:
        raise ImportError('latex support requires the "latex" optional dependencies')
    return str(escape_latex(text))


def print_metric_summary(
    scores: Mapping[MetricId, SetScore],
    *,
    output: OutputFormat = "stdout",
    colormap: str = "viridis",
    latex_enable_color: bool = False,
    printer: Callable[[str], None] = print,
) -> None:
    """Print the mean score per metric, in the requested output format."""
    rows = [(m, scores[m]) for m in MetricId if m in scores]
    if output == "stdout":
        for metric, score in rows:
            printer(
                f"{metric.value}: {_fmt(score.mean)} "
                f"({score.n_defined}/{len(score.per_image)} defined)"
            )
    elif output == "csv":
        _print_csv(
            [("metric", "mean", "n_defined", "n")]
            + [
                (metric.value, _fmt(score.mean, 6), score.n_defined, len(score.per_image))
                for metric, score in rows
            ],
            printer,
        )
    elif output == "latex":
        printer(r"\begin{tabular}{lrr}")
        printer(r"metric & mean & defined \\")
        printer(r"\hline")
        for metric, score in rows:
            cell = _fmt(score.mean)
            if latex_enable_color and score.defined:
                lo, hi = metric.value_range
                if not math.isfinite(hi):
                    hi = max(s.mean for _, s in rows if s.defined)
                shade = _Shade(lo, hi, lower_is_better=not metric.higher_is_better)
                cell = _shaded(cell, shade(score.mean), colormap)
            printer(
                f"{_escape(metric.value)} & {cell} & "
                f"{score.n_defined}/{len(score.per_image)} \\\\"
            )
        printer(r"\end{tabular}")
    else:
        raise ValueError(f"Invalid output format: {output}")


def print_estimate(
    result: EstimationResult,
    *,
    output: OutputFormat = "stdout",
    printer: Callable[[str], None] = print,
) -> None:
    fields = [
        ("metric", result.metric.value),
        ("phi_pseudo", _fmt(result.phi_pseudo, 6)),
        ("phi_estimated", _fmt(result.phi_estimated, 6)),
        ("clamped", str(result.clamped).lower()),
        ("extrapolated", str(result.extrapolated).lower()),
        ("n_unlabeled", str(result.n_unlabeled)),
    ]
    if output == "stdout":
        for key, value in fields:
            printer(f"{key}: {value}")
    elif output == "csv":
        _print_csv([[k for k, _ in fields], [v for _, v in fields]], printer)
    elif output == "latex":
        printer(r"\begin{tabular}{lr}")
        for key, value in fields:
            printer(f"{_escape(key)} & {_escape(value)} \\\\")
        printer(r"\end{tabular}")
    else:
        raise ValueError(f"Invalid output format: {output}")


MetaTable = Mapping[str, Mapping[MetricId, MetaScore]]


def meta_table_summary(
    table: MetaTable, metrics: Sequence[MetricId]
) -> dict[str, dict[MetricId, tuple[Optional[float], Optional[float]]]]:
    """Mean and sample STD of (MAE, correlation) per metric across rows.

    STD is None with fewer than two rows; correlations that are undefined in a
    row are left out of that column's aggregate.
    """
    mean_row: dict[MetricId, tuple[Optional[float], Optional[float]]] = {}
    std_row: dict[MetricId, tuple[Optional[float], Optional[float]]] = {}
    for metric in metrics:
        maes = [row[metric].mae for row in table.values() if metric in row]
        corrs = [
            c
            for row in table.values()
            if metric in row and (c := row[metric].correlation) is not None
        ]
        mean_row[metric] = (
            statistics.fmean(maes) if maes else None,
            statistics.fmean(corrs) if corrs else None,
        )
        std_row[metric] = (
            statistics.stdev(maes) if len(maes) > 1 else None,
            statistics.stdev(corrs) if len(corrs) > 1 else None,
        )
    return {"Mean": mean_row, "STD": std_row}


def _meta_rows(
    table: MetaTable, metrics: Sequence[MetricId], summary_rows: bool = True
) -> list[tuple[str, list[Optional[float]]]]:
    rows: list[tuple[str, list[Optional[float]]]] = []
    for label, row in table.items():
        cells: list[Optional[float]] = []
        for m in metrics:
            score = row.get(m)
            cells += [score.mae, score.correlation] if score else [None, None]
        rows.append((label, cells))
    if summary_rows and len(table) > 1:
        for label, agg in meta_table_summary(table, metrics).items():
            cells = []
            for m in metrics:
                cells += list(agg[m])
            rows.append((label, cells))
    return rows


def print_meta_table(
    table: MetaTable,
    *,
    output: OutputFormat = "stdout",
    colormap: str = "viridis",
    latex_enable_color: bool = False,
    summary_rows: bool = True,
    printer: Callable[[str], None] = print,
) -> None:
    """Print MAE and correlation per metric, one row per run plus Mean/STD rows."""
    if not table:
        printer("No meta-evaluation results.")
        return
    metrics = [m for m in MetricId if any(m in row for row in table.values())]
    rows = _meta_rows(table, metrics, summary_rows)

    if output == "stdout":
        label_width = max(len(label) for label, _ in rows + [("run", [])])
        num_width = 10
        header = "run".ljust(label_width)
        for m in metrics:
            header += f"{m.value} MAE".rjust(num_width + 4)
            header += f"{m.value} Corr".rjust(num_width + 4)
        printer(header)
        for label, cells in rows:
            line = label.ljust(label_width)
            for value in cells:
                line += _fmt(value).rjust(num_width + 4)
            printer(line)
    elif output == "csv":
        header_cells = ["run"]
        for m in metrics:
            header_cells += [f"{m.value}_mae", f"{m.value}_corr"]
        body = [[label] + ["" if v is None else f"{v:.4f}" for v in cells] for label, cells in rows]
        _print_csv([header_cells] + body, printer)
    elif output == "latex":
        _print_meta_table_latex(
            rows,
            metrics,
            n_runs=len(table),
            enable_color=latex_enable_color,
            colormap=colormap,
            printer=printer,
        )
    else:
        raise ValueError(f"Invalid output format: {output}")


@dataclass(frozen=True)
class _Shade:
    """Position of a cell on the colormap: 1 at the good end of ``[lo, hi]``."""

    lo: float
    hi: float
    lower_is_better: bool = False

    def __call__(self, value: float) -> float:
        if self.hi <= self.lo:
            return 1.0
        t = (min(max(value, self.lo), self.hi) - self.lo) / (self.hi - self.lo)
        return 1.0 - t if self.lower_is_better else t


def _column_shade(values: Sequence[float], is_mae: bool) -> _Shade:
    # MAE is measured from a perfect 0, correlation up to a perfect 1
    if is_mae:
        return _Shade(0.0, max(values, default=0.0), lower_is_better=True)
    return _Shade(min(values, default=1.0), 1.0)


def _shaded(cell: str, shade: float, colormap: str) -> str:
    """Wrap ``cell`` in a light background taken from ``colormap`` at ``shade``."""
    from matplotlib import colormaps
    from matplotlib.colors import to_hex, to_rgb

    if colormap not in colormaps:
        raise ValueError(f"Invalid colormap: {colormap}")
    r, g, b = to_rgb(colormaps[colormap](shade))
    # blend 70% toward white so black digits stay readable
    light = to_hex((0.7 + 0.3 * r, 0.7 + 0.3 * g, 0.7 + 0.3 * b))[1:].upper()
    return rf"\cellcolor[HTML]{{{light}}}{{{cell}}}"


def _print_meta_table_latex(
    rows: Sequence[tuple[str, Sequence[Optional[float]]]],
    metrics: Sequence[MetricId],
    *,
    n_runs: int,
    enable_color: bool,
    colormap: str,
    printer: Callable[[str], None],
) -> None:
    """Two columns per metric, MAE then correlation. Run rows are shaded per
    column; the Mean/STD rows are not."""
    shades = [
        _column_shade(
            [v for _, cells in rows[:n_runs] if (v := cells[j]) is not None], is_mae=j % 2 == 0
        )
        for j in range(2 * len(metrics))
    ]

    printer(r"\begin{tabular}{l" + "rr" * len(metrics) + "}")
    printer(
        "\t & "
        + " & ".join(rf"\multicolumn{{2}}{{c}}{{{_escape(m.value)}}}" for m in metrics)
        + r" \\"
    )
    printer("\t & " + " & ".join(["MAE & Corr"] * len(metrics)) + r" \\")
    printer(r"\hline")
    for i, (label, cells) in enumerate(rows):
        if i == n_runs:
            printer(r"\hline")
        out = [_escape(label)]
        for value, shade in zip(cells, shades):
            if value is None:
                out.append("")
            elif enable_color and i < n_runs:
                out.append(_shaded(f"{value:.4f}", shade(value), colormap))
            else:
                out.append(f"{value:.4f}")
        printer("\t" + " & ".join(out) + r" \\")
    printer(r"\end{tabular}")
