"""Self-contained SVG emission for curves, histograms, and training logs.

Hand-written SVG keeps the output dependency-free and structurally testable:
a curve of N points is exactly one polyline with N vertices per series.
"""

from __future__ import annotations

import json
from pathlib import Path

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 62, 16, 34, 44
SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                 "#8c564b", "#e377c2", "#7f7f7f")


def read_csv_columns(path: Path | str) -> dict[str, list[float]]:
    """Parse a numeric CSV with a header row; empty data is an error."""
    lines = [ln for ln in Path(path).read_text("utf-8").splitlines() if ln.strip()]
    if len(lines) < 2:
        raise ValueError(f"{path}: no data rows")
    header = [h.strip() for h in lines[0].split(",")]
    cols: dict[str, list[float]] = {h: [] for h in header}
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(header):
            raise ValueError(f"{path}: malformed row {ln!r}")
        for h, p in zip(header, parts):
            try:
                cols[h].append(float(p))
            except ValueError as e:
                raise ValueError(f"{path}: non-numeric value {p!r} in column "
                                 f"{h}") from e
    return cols


def _esc(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def _scale(vals: list[float]) -> tuple[float, float]:
    lo, hi = min(vals), max(vals)
    if hi == lo:
        hi = lo + 1.0
    return lo, hi


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, config: dict):
        self.parts = [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f"<!-- cyclelab plot config: {json.dumps(config, sort_keys=True)} -->",
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{_esc(title)}</text>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">{_esc(xlabel)}</text>',
            f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12" '
            f'transform="rotate(-90 14 {HEIGHT / 2})">{_esc(ylabel)}</text>',
        ]
        self.x0, self.x1 = MARGIN_L, WIDTH - MARGIN_R
        self.y0, self.y1 = HEIGHT - MARGIN_B, MARGIN_T  # y grows upward

    def set_limits(self, xlo, xhi, ylo, yhi):
        self.xlo, self.xhi, self.ylo, self.yhi = xlo, xhi, ylo, yhi

    def px(self, x: float) -> float:
        return self.x0 + (x - self.xlo) / (self.xhi - self.xlo) * (self.x1 - self.x0)

    def py(self, y: float) -> float:
        return self.y0 + (y - self.ylo) / (self.yhi - self.ylo) * (self.y1 - self.y0)

    def axes(self):
        self.parts.append(
            f'<path d="M {self.x0} {self.y1} L {self.x0} {self.y0} '
            f'L {self.x1} {self.y0}" stroke="black" fill="none"/>')
        for frac in (0.0, 0.5, 1.0):
            xv = self.xlo + frac * (self.xhi - self.xlo)
            yv = self.ylo + frac * (self.yhi - self.ylo)
            xp, yp = self.px(xv), self.py(yv)
            self.parts.append(
                f'<text x="{xp:.1f}" y="{self.y0 + 16}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="10">{xv:.4g}</text>')
            self.parts.append(
                f'<text x="{self.x0 - 6}" y="{yp + 3:.1f}" text-anchor="end" '
                f'font-family="sans-serif" font-size="10">{yv:.4g}</text>')

    def polyline(self, xs, ys, color: str):
        pts = " ".join(f"{self.px(x):.2f},{self.py(y):.2f}"
                       for x, y in zip(xs, ys))
        self.parts.append(f'<polyline fill="none" stroke="{color}" '
                          f'stroke-width="1.5" points="{pts}"/>')

    def rect(self, x, y, w, h, color: str, opacity: float = 0.6):
        self.parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" '
            f'fill="{color}" fill-opacity="{opacity}" stroke="{color}"/>')

    def legend(self, labels: list[str]):
        for i, label in enumerate(labels):
            color = SERIES_COLORS[i % len(SERIES_COLORS)]
            y = MARGIN_T + 6 + 16 * i
            self.parts.append(f'<line x1="{self.x1 - 150}" y1="{y}" '
                              f'x2="{self.x1 - 126}" y2="{y}" stroke="{color}" '
                              f'stroke-width="2"/>')
            self.parts.append(
                f'<text x="{self.x1 - 120}" y="{y + 4}" font-family="sans-serif" '
                f'font-size="11">{_esc(label)}</text>')

    def to_svg(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _series_label(path: Path, used: set[str]) -> str:
    label = path.parent.name or path.stem
    if label in used:
        label = f"{label}/{path.stem}"
    used.add(label)
    return label


def render_curves(inputs: list[Path | str], x_col: str, y_col: str,
                  title: str, xlabel: str, ylabel: str, config: dict) -> str:
    series = []
    used: set[str] = set()
    for p in inputs:
        p = Path(p)
        cols = read_csv_columns(p)
        for col in (x_col, y_col):
            if col not in cols:
                raise ValueError(f"{p}: missing column {col!r}")
        series.append((_series_label(p, used), cols[x_col], cols[y_col]))
    canvas = _Canvas(title, xlabel, ylabel, config)
    xlo, xhi = _scale([x for _, xs, _ in series for x in xs])
    ylo, yhi = _scale([y for _, _, ys in series for y in ys] + [0.0])
    canvas.set_limits(xlo, xhi, ylo, yhi)
    canvas.axes()
    for i, (_, xs, ys) in enumerate(series):
        canvas.polyline(xs, ys, SERIES_COLORS[i % len(SERIES_COLORS)])
    canvas.legend([label for label, _, _ in series])
    return canvas.to_svg()


def render_histogram(inputs: list[Path | str], value_col: str, title: str,
                     xlabel: str, config: dict, bins: int = 20) -> str:
    series = []
    used: set[str] = set()
    for p in inputs:
        p = Path(p)
        cols = read_csv_columns(p)
        if value_col not in cols:
            raise ValueError(f"{p}: missing column {value_col!r}")
        series.append((_series_label(p, used), cols[value_col]))
    all_vals = [v for _, vals in series for v in vals]
    lo, hi = _scale(all_vals)
    width = (hi - lo) / bins
    counts_per_series = []
    for _, vals in series:
        counts = [0] * bins
        for v in vals:
            k = min(bins - 1, int((v - lo) / width))
            counts[k] += 1
        counts_per_series.append(counts)

    canvas = _Canvas(title, xlabel, "count", config)
    canvas.set_limits(lo, hi, 0.0, max(max(c) for c in counts_per_series))
    canvas.axes()
    for i, counts in enumerate(counts_per_series):
        color = SERIES_COLORS[i % len(SERIES_COLORS)]
        for k, c in enumerate(counts):
            if c == 0:
                continue
            x = canvas.px(lo + k * width)
            w = canvas.px(lo + (k + 1) * width) - x
            y = canvas.py(c)
            canvas.rect(x, y, w, canvas.y0 - y, color)
    canvas.legend([label for label, _ in series])
    return canvas.to_svg()


def emit_plot(kind: str, inputs: list[Path | str], out: Path | str) -> Path:
    """Write one of the supported plot kinds; returns the output path."""
    config = {"kind": kind, "inputs": [str(p) for p in inputs]}
    if kind == "sn":
        svg = render_curves(inputs, "sigma", "value",
                            "Sensitivity to noise", "noise sigma",
                            "reconstruction MSE", config)
    elif kind == "rh":
        svg = render_histogram(inputs, "value",
                               "Quantized reconstruction honesty",
                               "per-sample honesty gap", config)
    elif kind == "log":
        svg = render_curves(inputs, "iter", "total", "Training loss",
                            "iteration", "generator objective", config)
    else:
        raise ValueError(f"unknown plot kind {kind!r} (use sn, rh, or log)")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg, encoding="utf-8")
    return out
