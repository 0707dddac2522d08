"""Learning-curve plots written straight to SVG, computed only from metric files."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


class AlignmentError(ValueError):
    """Curves that should share evaluation steps do not."""


@dataclass
class Curve:
    label: str
    x: np.ndarray
    mean: np.ndarray
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v: str) -> float:
    return float(v) if v not in ("", None) else float("nan")


def run_curve(run_dir: str | Path, column: str = "mean") -> tuple[np.ndarray, np.ndarray]:
    """Evaluation curve of one run, falling back to episode returns when no evaluations were logged."""
    run_dir = Path(run_dir)
    rows = read_csv(run_dir / "eval.csv") if (run_dir / "eval.csv").exists() else []
    if rows:
        return np.array([_num(r["env_step"]) for r in rows]), np.array([_num(r[column]) for r in rows])
    rows = [r for r in read_csv(run_dir / "metrics.csv") if r["episode"] != ""]
    return np.array([_num(r["env_step"]) for r in rows]), np.array([_num(r["return"]) for r in rows])


def band(label: str, runs: list[tuple[np.ndarray, np.ndarray]]) -> Curve:
    """Pointwise mean, minimum and maximum over runs sharing x values."""
    if not runs:
        raise AlignmentError(f"{label}: no runs")
    x0 = runs[0][0]
    for x, _ in runs[1:]:
        if len(x) != len(x0) or not np.array_equal(x, x0):
            raise AlignmentError(
                f"{label}: runs have mismatched evaluation steps ({len(x0)} vs {len(x)} points)"
            )
    ys = np.stack([y for _, y in runs])
    return Curve(label, x0, ys.mean(0), ys.min(0), ys.max(0))


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    return np.arange(np.ceil(lo / step) * step, hi + 1e-9 * step, step)


def render_svg(curves: list[Curve], title: str = "", xlabel: str = "env step", ylabel: str = "return",
               width: int = 640, height: int = 400) -> str:
    left, right, top, bottom = 70, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs = np.concatenate([c.x for c in curves])
    ys = np.concatenate([v for c in curves for v in (c.mean, c.lo, c.hi) if v is not None])
    ys = ys[np.isfinite(ys)]
    x0, x1 = (float(xs.min()), float(xs.max())) if xs.size else (0.0, 1.0)
    y0, y1 = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(x):
        return left + (np.asarray(x) - x0) / (x1 - x0) * pw

    def py(y):
        return top + ph - (np.asarray(y) - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        X = float(px(t))
        out.append(f'<line x1="{X:.1f}" y1="{top + ph}" x2="{X:.1f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{X:.1f}" y="{top + ph + 16}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        Y = float(py(t))
        out.append(f'<line x1="{left - 4}" y1="{Y:.1f}" x2="{left}" y2="{Y:.1f}" stroke="black"/>')
        out.append(f'<line x1="{left}" y1="{Y:.1f}" x2="{left + pw}" y2="{Y:.1f}" stroke="#eee"/>')
        out.append(f'<text x="{left - 6}" y="{Y + 4:.1f}" text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for k, c in enumerate(curves):
        color = PALETTE[k % len(PALETTE)]
        if c.lo is not None and c.hi is not None and len(c.x):
            pts = list(zip(px(c.x), py(c.hi))) + list(zip(px(c.x[::-1]), py(c.lo[::-1])))
            poly = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
            out.append(f'<polygon points="{poly}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        if len(c.x):
            d = " ".join(
                f"{'M' if i == 0 else 'L'}{a:.1f},{b:.1f}" for i, (a, b) in enumerate(zip(px(c.x), py(c.mean)))
            )
            out.append(f'<path d="{d}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = top + 14 + 18 * k
        out.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly}">{escape(c.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
