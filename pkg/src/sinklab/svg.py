"""Dependency-free SVG heatmaps and line charts (best effort; CSV is the primary output)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np


def _color(t: float) -> str:
    # white -> dark red
    t = min(max(t, 0.0), 1.0)
    r = 255 - int(90 * t)
    g = b = 255 - int(235 * t)
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap(matrix, path, title: str = "", xlabel: str = "", ylabel: str = "", cell: int = 14,
            vmin: float | None = None, vmax: float | None = None) -> Path:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("heatmap needs a 2-D array")
    lo = float(m.min()) if vmin is None else vmin
    hi = float(m.max()) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    rows, cols = m.shape
    left, top = 50, 30
    w, h = left + cols * cell + 10, top + rows * cell + 30
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">',
           f'<text x="{left}" y="15">{escape(title)}</text>']
    for r in range(rows):
        for c in range(cols):
            out.append(f'<rect x="{left + c * cell}" y="{top + r * cell}" width="{cell}" height="{cell}" '
                       f'fill="{_color((m[r, c] - lo) / span)}"><title>{r},{c}: {m[r, c]:.4g}</title></rect>')
    out.append(f'<text x="{left}" y="{h - 8}">{escape(xlabel)}</text>')
    out.append(f'<text x="4" y="{top + 10}">{escape(ylabel)}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


def line_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]], path, title: str = "",
               width: int = 420, height: int = 260) -> Path:
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    xs = [x for v in series.values() for x in v[0]]
    ys = [y for v in series.values() for y in v[1]]
    x0, x1 = (min(xs), max(xs)) if xs else (0, 1)
    y0, y1 = (min(ys), max(ys)) if ys else (0, 1)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    pad = 40

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">',
           f'<text x="{pad}" y="15">{escape(title)}</text>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{pad}" y="{height - pad + 14}">{x0:.4g}</text>',
           f'<text x="{width - pad}" y="{height - pad + 14}">{x1:.4g}</text>',
           f'<text x="2" y="{height - pad}">{y0:.3g}</text>', f'<text x="2" y="{pad}">{y1:.3g}</text>']
    for k, (name, (x, y)) in enumerate(series.items()):
        col = palette[k % len(palette)]
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{width - pad - 80}" y="{pad + 12 * k}" fill="{col}">{escape(name)}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path
