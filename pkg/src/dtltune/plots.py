"""Minimal SVG charts for run reports: line series, histograms and scatter."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

W, H = 640, 400
PAD_L, PAD_R, PAD_T, PAD_B = 60, 20, 30, 45
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd")


def _span(values, lo=None, hi=None):
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    lo = float(v.min()) if lo is None and v.size else (0.0 if lo is None else lo)
    hi = float(v.max()) if hi is None and v.size else (1.0 if hi is None else hi)
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


class _Canvas:
    def __init__(self, title, xlabel, ylabel, xr, yr):
        self.xr, self.yr = xr, yr
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
            f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="14" y="{H / 2}" text-anchor="middle" transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
        ]
        x0, y0, x1, y1 = PAD_L, H - PAD_B, W - PAD_R, PAD_T
        self.parts.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="#444"/>')
        for t in np.linspace(*xr, 5):
            self.parts.append(f'<text x="{self.x(t):.1f}" y="{y0 + 14}" text-anchor="middle">{t:.4g}</text>')
        for t in np.linspace(*yr, 5):
            self.parts.append(f'<text x="{x0 - 4}" y="{self.y(t) + 4:.1f}" text-anchor="end">{t:.4g}</text>')

    def x(self, v):
        return PAD_L + (v - self.xr[0]) / (self.xr[1] - self.xr[0]) * (W - PAD_L - PAD_R)

    def y(self, v):
        return H - PAD_B - (v - self.yr[0]) / (self.yr[1] - self.yr[0]) * (H - PAD_T - PAD_B)

    def legend(self, labels):
        for i, lab in enumerate(labels):
            yy = PAD_T + 14 + 14 * i
            self.parts.append(f'<rect x="{W - PAD_R - 120}" y="{yy - 8}" width="10" height="10" fill="{COLORS[i % len(COLORS)]}"/>')
            self.parts.append(f'<text x="{W - PAD_R - 105}" y="{yy + 1}">{escape(str(lab))}</text>')

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.parts + ["</svg>"]) + "\n")


def line_plot(path, series: dict, title="", xlabel="", ylabel="") -> None:
    """``series`` maps a label to ``(x, y)`` arrays."""
    xs = [v for x, _ in series.values() for v in x]
    ys = [v for _, y in series.values() for v in y]
    c = _Canvas(title, xlabel, ylabel, _span(xs), _span(ys))
    for i, (label, (x, y)) in enumerate(series.items()):
        pts = " ".join(f"{c.x(a):.1f},{c.y(b):.1f}" for a, b in zip(x, y) if np.isfinite(b))
        c.parts.append(f'<polyline points="{pts}" fill="none" stroke="{COLORS[i % len(COLORS)]}" stroke-width="1.2"/>')
    if len(series) > 1:
        c.legend(series)
    c.save(path)


def histogram_plot(path, edges, counts: dict, title="", xlabel="", ylabel="count") -> None:
    """Side-by-side bars per bin; ``counts`` maps a label to per-bin counts."""
    edges = np.asarray(edges, dtype=float)
    top = max([max(v) for v in counts.values() if len(v)] + [1])
    c = _Canvas(title, xlabel, ylabel, (edges[0], edges[-1]), (0.0, float(top)))
    k = max(1, len(counts))
    for i, (label, cs) in enumerate(counts.items()):
        for lo, hi, n in zip(edges[:-1], edges[1:], cs):
            w = (c.x(hi) - c.x(lo)) / k
            x = c.x(lo) + i * w
            c.parts.append(f'<rect x="{x:.1f}" y="{c.y(n):.1f}" width="{max(w - 1, 0.5):.1f}" '
                           f'height="{c.y(0) - c.y(n):.1f}" fill="{COLORS[i % len(COLORS)]}"/>')
    c.legend(counts)
    c.save(path)


def scatter_plot(path, groups: dict, title="", xlabel="", ylabel="", xlim=None, ylim=None) -> None:
    """``groups`` maps a label to an ``(n, 2)`` array of points."""
    pts = [np.asarray(g, dtype=float).reshape(-1, 2) for g in groups.values()]
    allp = np.vstack(pts) if pts else np.zeros((0, 2))
    c = _Canvas(title, xlabel, ylabel, xlim or _span(allp[:, 0]), ylim or _span(allp[:, 1]))
    for i, g in enumerate(pts):
        col = COLORS[i % len(COLORS)]
        for a, b in g:
            c.parts.append(f'<circle cx="{c.x(a):.1f}" cy="{c.y(b):.1f}" r="1.6" fill="{col}" fill-opacity="0.6"/>')
    c.legend(groups)
    c.save(path)
