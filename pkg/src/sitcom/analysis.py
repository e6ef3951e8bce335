"""Protocol heatmaps, learning curves and cross-regime comparison reports.

CSV schemas
-----------
``heatmap.csv``  layout, x, y, visits, solicitations, symbol, action, count
    one row per (cell, delivered symbol, action) with a nonzero count; ``symbol``
    is ``-`` when nothing was delivered.
``finals.csv``   metric, label, mean, stderr, n
    ``mean`` and ``stderr`` read ``missing`` when no run in the set logged the metric.
``curves_<metric>.csv``  label, x, mean, stderr

Floats are written with ``repr`` so they parse back to the identical double.
"""

from __future__ import annotations

import csv
import dataclasses
import html
import math
import os
from collections import Counter, defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from sitcom import env
from sitcom.records import EpisodeTrace, read_log, read_traces

METRICS = ("M_t", "M_o", "M_s")
# Per-episode log field whose trailing mean is each metric.
METRIC_TERMS = {"M_t": "R", "M_o": "o", "M_s": "s"}
MISSING = "missing"
DEFAULT_WINDOW = 100

LogSource = Union[str, os.PathLike, Sequence[dict]]


class MetricMissing(KeyError):
    """A requested metric is absent from a log."""

    def __str__(self):
        return str(self.args[0])


# heatmaps ---------------------------------------------------------------


def _symbol_key(delivered):
    if delivered is None:
        return None
    return delivered[0] if len(delivered) == 1 else tuple(delivered)


def _fmt_key(sym) -> str:
    if sym is None:
        return "-"
    if isinstance(sym, tuple):
        return ".".join(str(s) for s in sym)
    return str(sym)


@dataclasses.dataclass
class HeatmapGrid:
    layout: str
    visits: Counter = dataclasses.field(default_factory=Counter)
    solicitations: Counter = dataclasses.field(default_factory=Counter)
    pairs: dict = dataclasses.field(default_factory=lambda: defaultdict(Counter))

    def symbol_counts(self, cell: env.Cell) -> Counter:
        out = Counter()
        for (sym, _), n in self.pairs.get(cell, {}).items():
            out[sym] += n
        return out

    def count(self, cell: env.Cell, symbol) -> int:
        return self.symbol_counts(cell)[symbol]

    def dominant_symbol(self, cell: env.Cell) -> tuple[object, float]:
        """Most frequent delivered symbol at ``cell`` and its share of deliveries.

        Undelivered steps are ignored; ``(None, 0.0)`` when nothing was delivered.
        Ties go to the smallest symbol.
        """
        counts = self.symbol_counts(cell)
        counts.pop(None, None)
        total = sum(counts.values())
        if not total:
            return None, 0.0
        sym = min(counts, key=lambda s: (-counts[s], _fmt_key(s)))
        return sym, counts[sym] / total

    def solicitation_rate(self, cell: env.Cell) -> float:
        v = self.visits[cell]
        return self.solicitations[cell] / v if v else 0.0

    @property
    def total_visits(self) -> int:
        return sum(self.visits.values())

    def rows(self) -> list[dict]:
        out = []
        for cell in sorted(self.pairs, key=lambda c: (c[1], c[0])):
            for (sym, action), n in sorted(self.pairs[cell].items(), key=lambda kv: (_fmt_key(kv[0][0]), kv[0][1])):
                out.append({
                    "layout": self.layout, "x": cell[0], "y": cell[1],
                    "visits": self.visits[cell], "solicitations": self.solicitations[cell],
                    "symbol": _fmt_key(sym), "action": env.Action(action).name.lower(), "count": n,
                })
        return out

    def write_csv(self, path) -> Path:
        return _write_csv(path, ("layout", "x", "y", "visits", "solicitations", "symbol", "action", "count"), self.rows())

    def to_svg(self) -> str:
        layout = env.build_layout(self.layout)
        cell_px = 40
        size = env.GRID_SIZE * cell_px
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 24}" font-family="sans-serif">']
        for y in range(env.GRID_SIZE):
            for x in range(env.GRID_SIZE):
                px, py = x * cell_px, y * cell_px
                if layout.walls[y, x]:
                    fill = "#444"
                else:
                    rate = self.solicitation_rate((x, y))
                    shade = int(255 - 155 * rate)
                    fill = f"rgb(255,{shade},{shade})" if self.visits[(x, y)] else "#fff"
                parts.append(f'<rect x="{px}" y="{py}" width="{cell_px}" height="{cell_px}" fill="{fill}" stroke="#999"/>')
                sym, p = self.dominant_symbol((x, y))
                if sym is not None:
                    parts.append(
                        f'<text x="{px + cell_px / 2}" y="{py + 17}" text-anchor="middle" font-size="13">{html.escape(_fmt_key(sym))}</text>'
                        f'<text x="{px + cell_px / 2}" y="{py + 32}" text-anchor="middle" font-size="9">{p:.2f}</text>'
                    )
        parts.append(f'<text x="4" y="{size + 16}" font-size="11">{html.escape(self.layout)}: dominant symbol (share); red = solicitation rate</text>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def protocol_heatmap(traces: Iterable[EpisodeTrace]) -> HeatmapGrid:
    traces = list(traces)
    if not traces:
        raise ValueError("protocol_heatmap needs at least one trace")
    layouts = {t.layout for t in traces}
    if len(layouts) > 1:
        raise ValueError(f"traces come from several layouts: {sorted(layouts)}")
    grid = HeatmapGrid(layouts.pop())
    for trace in traces:
        for step in trace.steps:
            cell = tuple(step.cell)
            grid.visits[cell] += 1
            grid.pairs[cell][(_symbol_key(step.delivered), int(step.listener_action))] += 1
            if step.requested:
                grid.solicitations[cell] += 1
    return grid


def load_traces(paths: Iterable[str | os.PathLike]) -> list[EpisodeTrace]:
    """Read trace files; a directory contributes every ``*.tsv`` below it."""
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files = sorted(p.rglob("*.tsv"))
            if not files:
                raise FileNotFoundError(f"no trace files under {p}")
        elif p.is_file():
            files = [p]
        else:
            raise FileNotFoundError(f"trace file not found: {p}")
        for f in files:
            out.extend(read_traces(f))
    return out


# curves -----------------------------------------------------------------


@dataclasses.dataclass
class CurveSeries:
    metric: str
    x_key: str
    x: np.ndarray
    per_seed: np.ndarray  # [seeds, points]
    mean: np.ndarray
    stderr: np.ndarray

    @property
    def n_seeds(self) -> int:
        return self.per_seed.shape[0]

    @property
    def band(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean - self.stderr, self.mean + self.stderr

    @property
    def final(self) -> tuple[float, float]:
        return float(self.mean[-1]), float(self.stderr[-1])


def _episode_records(source: LogSource) -> list[dict]:
    if isinstance(source, (str, os.PathLike)):
        p = Path(source)
        if p.is_dir():
            p = p / "log.jsonl"
        return read_log(p, "episode")
    return [r for r in source if r.get("kind", "episode") == "episode"]


def _metric_values(records: list[dict], metric: str, where: str) -> np.ndarray:
    key = METRIC_TERMS.get(metric, metric)
    if not records or any(key not in r for r in records):
        raise MetricMissing(f"metric {metric!r} not found in {where}")
    return np.array([float(r[key]) for r in records])


def trailing_mean(values: np.ndarray, window: int) -> np.ndarray:
    """Mean over the last ``window`` values at every position (fewer at the start)."""
    if window < 1:
        raise ValueError("smoothing window must be at least 1")
    values = np.asarray(values, dtype=np.float64)
    if window == 1:
        return values.copy()
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def _stderr_rows(ys: np.ndarray) -> np.ndarray:
    if ys.shape[0] < 2:
        return np.zeros(ys.shape[1])
    return ys.std(axis=0, ddof=1) / math.sqrt(ys.shape[0])


def learning_curves(
    logs: Sequence[LogSource],
    metric: str,
    window: int = DEFAULT_WINDOW,
    x_key: str = "episode",
    points: int = 200,
) -> CurveSeries:
    """Per-seed trailing-window curves on a shared x grid, with mean and standard error.

    ``M_t``/``M_o``/``M_s`` smooth the per-episode terms (``R``, ``o``, ``s``);
    any other name smooths that log field directly. With ``x_key="episode"``
    series are cut to the shortest log; with ``"env_steps"`` they are
    interpolated onto ``points`` evenly spaced steps covering the overlap
    (unless every log already shares the same steps).
    """
    if not logs:
        raise ValueError("learning_curves needs at least one log")
    xs, ys = [], []
    for i, src in enumerate(logs):
        where = str(src) if isinstance(src, (str, os.PathLike)) else f"log #{i}"
        recs = _episode_records(src)
        vals = trailing_mean(_metric_values(recs, metric, where), window)
        if x_key not in recs[0]:
            raise MetricMissing(f"x axis {x_key!r} not found in {where}")
        xs.append(np.array([float(r[x_key]) for r in recs]))
        ys.append(vals)
    if x_key == "episode" or all(len(x) == len(xs[0]) and np.array_equal(x, xs[0]) for x in xs):
        n = min(len(x) for x in xs)
        grid = xs[0][:n]
        mat = np.stack([y[:n] for y in ys])
    else:
        lo = max(x[0] for x in xs)
        hi = min(x[-1] for x in xs)
        if hi < lo:
            raise ValueError("logs share no common step range")
        grid = np.linspace(lo, hi, points) if hi > lo else np.array([lo])
        mat = np.stack([np.interp(grid, x, y) for x, y in zip(xs, ys)])
    return CurveSeries(metric, x_key, grid, mat, mat.mean(axis=0), _stderr_rows(mat))


# comparison report -----------------------------------------------------------


@dataclasses.dataclass
class FinalValue:
    mean: float
    stderr: float
    n: int


@dataclasses.dataclass
class ComparisonReport:
    labels: list[str]
    finals: dict  # (metric, label) -> FinalValue | MISSING
    curves: dict  # (metric, label) -> CurveSeries | MISSING
    files: list[Path] = dataclasses.field(default_factory=list)

    def row(self, metric: str) -> list:
        return [self.finals[(metric, label)] for label in self.labels]

    def table(self) -> dict:
        return {m: dict(zip(self.labels, self.row(m))) for m in METRICS}


def _final_values(logs: Sequence[LogSource], metric: str, window: int):
    finals = []
    for i, src in enumerate(logs):
        recs = _episode_records(src)
        try:
            vals = _metric_values(recs, metric, f"log #{i}")
        except MetricMissing:
            continue
        finals.append(float(np.mean(vals[-window:])))
    if not finals:
        return MISSING
    arr = np.array(finals)
    err = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return FinalValue(float(arr.mean()), err, arr.size)


def compare_report(
    run_sets: Mapping[str, Sequence[LogSource]],
    out_dir: str | os.PathLike | None = None,
    window: int = DEFAULT_WINDOW,
    x_key: str = "episode",
) -> ComparisonReport:
    """Success, optimality and sparsity side by side for each labelled set of runs.

    A run's final value is the mean of its last ``window`` per-episode terms;
    the table reports the across-run mean and standard error. A metric that no
    run in a set logged is reported as ``missing`` rather than raising.
    """
    for label, logs in run_sets.items():
        if not logs:
            raise ValueError(f"run set {label!r} is empty")
    labels = list(run_sets)
    finals, curves = {}, {}
    for metric in METRICS:
        for label in labels:
            logs = run_sets[label]
            finals[(metric, label)] = _final_values(logs, metric, window)
            present = [src for src in logs if _has_metric(src, metric)]
            curves[(metric, label)] = learning_curves(present, metric, window, x_key) if present else MISSING
    report = ComparisonReport(labels, finals, curves)
    if out_dir is not None:
        report.files = write_report(report, out_dir)
    return report


def _has_metric(src: LogSource, metric: str) -> bool:
    try:
        _metric_values(_episode_records(src), metric, "")
    except MetricMissing:
        return False
    return True


def _fmt_float(v: float) -> str:
    return repr(float(v))


def write_report(report: ComparisonReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    rows = []
    for metric in METRICS:
        for label in report.labels:
            fv = report.finals[(metric, label)]
            if fv == MISSING:
                rows.append({"metric": metric, "label": label, "mean": MISSING, "stderr": MISSING, "n": 0})
            else:
                rows.append({"metric": metric, "label": label, "mean": _fmt_float(fv.mean),
                             "stderr": _fmt_float(fv.stderr), "n": fv.n})
    files = [_write_csv(out / "finals.csv", ("metric", "label", "mean", "stderr", "n"), rows)]
    for metric in METRICS:
        crow = []
        series = []
        for label in report.labels:
            c = report.curves[(metric, label)]
            if c == MISSING:
                continue
            series.append((label, c))
            crow.extend({"label": label, "x": _fmt_float(x), "mean": _fmt_float(m), "stderr": _fmt_float(e)}
                        for x, m, e in zip(c.x, c.mean, c.stderr))
        files.append(_write_csv(out / f"curves_{metric}.csv", ("label", "x", "mean", "stderr"), crow))
        svg = out / f"{metric}.svg"
        svg.write_text(curve_svg(series, metric))
        files.append(svg)
    return files


def read_finals_csv(path) -> dict:
    """Parse ``finals.csv`` back into ``{(metric, label): FinalValue | MISSING}``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["metric"], row["label"])
            if row["mean"] == MISSING:
                out[key] = MISSING
            else:
                out[key] = FinalValue(float(row["mean"]), float(row["stderr"]), int(row["n"]))
    return out


def _write_csv(path, fields, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


# svg ------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#7f7f7f")


def curve_svg(series: Sequence[tuple[str, CurveSeries]], title: str, width: int = 480, height: int = 300) -> str:
    """Line plot with a shaded mean +/- stderr band per series."""
    left, right, top, bottom = 56, 110, 28, 36
    pw, ph = width - left - right, height - top - bottom
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
             f'<text x="{left}" y="16" font-size="13">{html.escape(title)}</text>']
    if not series:
        parts.append(f'<text x="{left}" y="{top + ph / 2}">no data</text></svg>\n')
        return "\n".join(parts)
    xs = np.concatenate([c.x for _, c in series])
    lows = np.concatenate([c.band[0] for _, c in series])
    highs = np.concatenate([c.band[1] for _, c in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(np.nanmin(lows)), float(np.nanmax(highs))
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + (1 - (v - y0) / (y1 - y0)) * ph

    parts.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>')
    for v in np.linspace(y0, y1, 5):
        parts.append(f'<text x="{left - 4}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    for v in np.linspace(x0, x1, 5):
        parts.append(f'<text x="{sx(v):.1f}" y="{top + ph + 14}" text-anchor="middle">{v:.3g}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 4}" text-anchor="middle">{html.escape(series[0][1].x_key)}</text>')
    for i, (label, c) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        lo, hi = c.band
        band = [f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(c.x, hi)] + [
            f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(c.x[::-1], lo[::-1])]
        parts.append(f'<polygon points="{" ".join(band)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(c.x, c.mean))
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top + 14 * (i + 1)
        parts.append(f'<line x1="{left + pw + 8}" y1="{ly - 4}" x2="{left + pw + 22}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
                     f'<text x="{left + pw + 26}" y="{ly}">{html.escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
