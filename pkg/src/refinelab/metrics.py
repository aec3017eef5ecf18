"""Accuracy aggregation, table/CSV/JSON output and small SVG plots."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

CSV_COLUMNS = ("method", "source", "target", "n", "k", "T", "mean", "ci95", "seed")
Z95 = 1.96


class MeanCI(NamedTuple):
    mean: float
    halfwidth: float
    defined: bool  # False when T == 1 and the halfwidth is reported as 0


def mean_ci(accs: Sequence[float]) -> MeanCI:
    """Mean and normal-approximation 95% half-width (Bessel-corrected std)."""
    vals = [float(a) for a in accs]
    T = len(vals)
    if T == 0:
        raise ValueError("mean_ci needs at least one accuracy")
    mean = math.fsum(vals) / T
    if T == 1:
        return MeanCI(mean, 0.0, False)
    var = math.fsum((v - mean) ** 2 for v in vals) / (T - 1)
    return MeanCI(mean, Z95 * math.sqrt(var) / math.sqrt(T), True)


@dataclass
class EvalReport:
    task_accuracies: list[float]
    n: int
    k: int
    k_q: int
    method: str
    source: str = "source"
    target: str = ""
    seed: int = 0
    mean: float = field(init=False)
    ci95: float = field(init=False)
    ci_defined: bool = field(init=False)

    def __post_init__(self):
        self.task_accuracies = [float(a) for a in self.task_accuracies]
        for a in self.task_accuracies:
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"accuracy {a} outside [0, 1]")
        self.mean, self.ci95, self.ci_defined = mean_ci(self.task_accuracies)

    @property
    def T(self) -> int:
        return len(self.task_accuracies)

    def display(self) -> str:
        return format_pm(self.mean, self.ci95)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["T"] = self.T
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            d["task_accuracies"], d["n"], d["k"], d["k_q"], d["method"], d.get("source", "source"),
            d.get("target", ""), d.get("seed", 0),
        )


# -- display -----------------------------------------------------------------

_PM = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*±\s*(\d*\.\d+|\d+)\s*$")


def format_pm(mean: float, ci: float) -> str:
    """``0.6893, 0.0084`` -> ``68.93±.84`` (percent, two decimals, bare leading zero dropped)."""
    m = f"{100 * mean:.2f}"
    c = f"{100 * ci:.2f}"
    if c.startswith("0."):
        c = c[1:]
    return f"{m}±{c}"


def parse_pm(text: str) -> tuple[float, float]:
    """Inverse of :func:`format_pm`; returns fractions, not percent."""
    m = _PM.match(text)
    if not m:
        raise ValueError(f"not a mean±ci cell: {text!r}")
    return float(m.group(1)) / 100, float(m.group(2)) / 100


def render_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text table: one row per (method, target), one column per shot."""
    shots = sorted({r.k for r in reports})
    rows: dict[tuple[str, str], dict[int, str]] = {}
    for r in reports:
        rows.setdefault((r.method, r.target), {})[r.k] = r.display()
    header = ["method", "target"] + [f"{s}-shot" for s in shots]
    body = [[m, t] + [cells.get(s, "-") for s in shots] for (m, t), cells in rows.items()]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(line, widths)).rstrip() for line in [header, *body]]
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> dict[tuple[str, str], dict[int, tuple[float, float]]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split()
    shots = [int(h.split("-")[0]) for h in header[2:]]
    out = {}
    for ln in lines[1:]:
        cols = ln.split()
        out[(cols[0], cols[1])] = {s: parse_pm(c) for s, c in zip(shots, cols[2:]) if c != "-"}
    return out


# -- files -------------------------------------------------------------------


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([r.method, r.source, r.target, r.n, r.k, r.T, repr(r.mean), repr(r.ci95), r.seed])
    return buf.getvalue()


def reports_to_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True) + "\n"


def write_report(reports: Sequence[EvalReport], fmt: str, path) -> None:
    if not reports:
        raise ValueError("no reports to write")
    if fmt == "csv":
        text = reports_to_csv(reports)
    elif fmt == "json":
        text = reports_to_json(reports)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    Path(path).write_text(text)


def load_reports(path) -> list[EvalReport]:
    return [EvalReport.from_dict(d) for d in json.loads(Path(path).read_text())]


# -- plots -------------------------------------------------------------------

_W, _H = 480, 300
_L, _R, _T, _B = 56, 16, 24, 48
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _f(v: float) -> str:
    return f"{v:.2f}"


def _axes(labels: Sequence[str], lo: float, hi: float, title: str) -> list[str]:
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="16" text-anchor="middle">{_esc(title)}</text>',
        f'<line x1="{_L}" y1="{_H - _B}" x2="{_W - _R}" y2="{_H - _B}" stroke="black"/>',
        f'<line x1="{_L}" y1="{_T}" x2="{_L}" y2="{_H - _B}" stroke="black"/>',
    ]
    for i in range(5):
        v = lo + (hi - lo) * i / 4
        y = _y(v, lo, hi)
        out.append(f'<line x1="{_L - 4}" y1="{_f(y)}" x2="{_L}" y2="{_f(y)}" stroke="black"/>')
        out.append(f'<text x="{_L - 6}" y="{_f(y + 4)}" text-anchor="end">{100 * v:.1f}</text>')
    for i, lab in enumerate(labels):
        x = _x(i, len(labels))
        out.append(f'<text x="{_f(x)}" y="{_H - _B + 16}" text-anchor="middle">{_esc(lab)}</text>')
    return out


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _x(i: int, n: int) -> float:
    span = _W - _L - _R
    return _L + span * (i + 0.5) / max(n, 1)


def _y(v: float, lo: float, hi: float) -> float:
    return _H - _B - (_H - _T - _B) * (v - lo) / (hi - lo)


def _range(values: Sequence[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    pad = max(0.02, 0.1 * (hi - lo))
    return max(0.0, lo - pad), min(1.0, hi + pad)


def render_plot(
    reports: Sequence[EvalReport],
    kind: str,
    path=None,
    baseline: Sequence[EvalReport] = (),
    title: str = "",
) -> str:
    """Deterministic SVG.

    ``stage_trend`` draws one polyline per shot setting over the reports in
    order, with each shot's ``baseline`` report as a dashed horizontal line.
    ``ablation_bars`` draws grouped bars, one group per method label.
    """
    if not reports:
        raise ValueError("nothing to plot")
    shots = sorted({r.k for r in reports})
    labels = list(dict.fromkeys(r.method for r in reports))
    vals = [r.mean for r in reports] + [b.mean for b in baseline]
    lo, hi = _range(vals)
    svg = _axes(labels, lo, hi, title or kind)
    if kind == "stage_trend":
        for si, s in enumerate(shots):
            color = _PALETTE[si % len(_PALETTE)]
            pts = [(labels.index(r.method), r.mean) for r in reports if r.k == s]
            coords = " ".join(f"{_f(_x(i, len(labels)))},{_f(_y(v, lo, hi))}" for i, v in pts)
            svg.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
            for i, v in pts:
                svg.append(f'<circle cx="{_f(_x(i, len(labels)))}" cy="{_f(_y(v, lo, hi))}" r="3" fill="{color}"/>')
            for b in baseline:
                if b.k == s:
                    y = _f(_y(b.mean, lo, hi))
                    svg.append(
                        f'<line x1="{_L}" y1="{y}" x2="{_W - _R}" y2="{y}" stroke="{color}" '
                        f'stroke-dasharray="6,4"/>'
                    )
            svg.append(
                f'<text x="{_W - _R}" y="{_T + 14 * (si + 1)}" text-anchor="end" fill="{color}">{s}-shot</text>'
            )
    elif kind == "ablation_bars":
        group = (_W - _L - _R) / max(len(labels), 1)
        bw = 0.8 * group / len(shots)
        for r in reports:
            si = shots.index(r.k)
            x0 = _L + group * labels.index(r.method) + 0.1 * group + si * bw
            y = _y(r.mean, lo, hi)
            svg.append(
                f'<rect x="{_f(x0)}" y="{_f(y)}" width="{_f(bw)}" height="{_f(_H - _B - y)}" '
                f'fill="{_PALETTE[si % len(_PALETTE)]}"/>'
            )
        for b in baseline:
            si = shots.index(b.k) if b.k in shots else 0
            y = _f(_y(b.mean, lo, hi))
            svg.append(
                f'<line x1="{_L}" y1="{y}" x2="{_W - _R}" y2="{y}" stroke="{_PALETTE[si % len(_PALETTE)]}" '
                f'stroke-dasharray="6,4"/>'
            )
    else:
        raise ValueError(f"unknown plot kind {kind!r}; expected stage_trend or ablation_bars")
    svg.append("</svg>")
    text = "\n".join(svg) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
