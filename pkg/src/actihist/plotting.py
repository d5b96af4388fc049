"""Self-contained SVG plot of an estimated coefficient function with its band."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

REFERENCE_LINES = (200.0, 3600.0, 6200.0)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def function_svg(
    p: np.ndarray,
    estimate: np.ndarray,
    lower: np.ndarray | None = None,
    upper: np.ndarray | None = None,
    title: str = "",
    reference: Sequence[float] = REFERENCE_LINES,
    width: int = 640,
    height: int = 400,
) -> str:
    p = np.asarray(p, dtype=float)
    est = np.asarray(estimate, dtype=float)
    ys = [est] + [np.asarray(a, dtype=float) for a in (lower, upper) if a is not None]
    ymin = min(float(np.min(y)) for y in ys)
    ymax = max(float(np.max(y)) for y in ys)
    ymin, ymax = min(ymin, 0.0), max(ymax, 0.0)
    if ymax - ymin < 1e-12:
        ymin, ymax = ymin - 1.0, ymax + 1.0
    xmin, xmax = float(p.min()), float(p.max())
    if xmax - xmin < 1e-12:
        xmin, xmax = xmin - 1.0, xmax + 1.0
    left, right, top, bottom = 60, 20, 30, 40
    pw, ph = width - left - right, height - top - bottom

    def X(x):
        return left + (np.asarray(x) - xmin) / (xmax - xmin) * pw

    def Y(y):
        return top + (ymax - np.asarray(y)) / (ymax - ymin) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    if title:
        parts.append(f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>')
    for r in reference:
        if xmin <= r <= xmax:
            x = _fmt(float(X(r)))
            parts.append(f'<line x1="{x}" y1="{top}" x2="{x}" y2="{top + ph}" stroke="#999" stroke-dasharray="4,3"/>')
            parts.append(f'<text x="{x}" y="{top + ph + 14}" text-anchor="middle" font-size="10">{r:g}</text>')
    y0 = _fmt(float(Y(0.0)))
    parts.append(f'<line x1="{left}" y1="{y0}" x2="{left + pw}" y2="{y0}" stroke="#666"/>')
    if lower is not None and upper is not None:
        pts = list(zip(X(p), Y(upper))) + list(zip(X(p[::-1]), Y(np.asarray(lower)[::-1])))
        poly = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in pts)
        parts.append(f'<polygon points="{poly}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>')
    line = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(X(p), Y(est)))
    parts.append(f'<polyline points="{line}" fill="none" stroke="#08519c" stroke-width="1.5"/>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle" font-size="11">counts per minute</text>')
    parts.append(f'<text x="{left - 8}" y="{top + 4}" text-anchor="end" font-size="10">{ymax:.2g}</text>')
    parts.append(f'<text x="{left - 8}" y="{top + ph}" text-anchor="end" font-size="10">{ymin:.2g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_function_svg(path: str | Path, *args, **kwargs) -> None:
    Path(path).write_text(function_svg(*args, **kwargs))
