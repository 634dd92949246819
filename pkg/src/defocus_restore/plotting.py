"""Minimal raster charts from CSV tables, written as binary PPM.

The first column is the x value; every further numeric column becomes one
series.  Rendering involves no fonts and no floating-point state beyond
numpy, so the same table always gives the same bytes.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InputError
from .io_formats import read_csv, write_ppm

WIDTH = 480
HEIGHT = 320
MARGIN = 24
PALETTE = [
    (31, 119, 180), (214, 39, 40), (44, 160, 44), (255, 127, 14),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (23, 190, 207),
]


def load_table(path):
    """Header and a float array for a numeric CSV; "inf" entries stay inf."""
    header, rows = read_csv(path)
    if not header or not rows:
        raise InputError(f"{path}: empty table")
    try:
        data = np.array([[float(v) for v in row] for row in rows])
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric entry ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(header) or data.shape[1] < 2:
        raise InputError(f"{path}: need an x column and at least one series of equal length")
    return header, data


def _line(canvas, x0, y0, x1, y1, colour):
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.rint(np.linspace(x0, x1, n)).astype(int)
    ys = np.rint(np.linspace(y0, y1, n)).astype(int)
    for dx in (0, 1):
        for dy in (0, 1):
            canvas[np.clip(ys + dy, 0, HEIGHT - 1), np.clip(xs + dx, 0, WIDTH - 1)] = colour


def render(header, data, kind="line"):
    """Return an ``(HEIGHT, WIDTH, 3)`` ``uint8`` chart."""
    if kind not in ("line", "bar"):
        raise InputError(f"unknown chart kind {kind!r}")
    canvas = np.full((HEIGHT, WIDTH, 3), 255, dtype=np.uint8)
    x = data[:, 0]
    series = data[:, 1:]
    finite = series[np.isfinite(series)]
    if finite.size == 0:
        raise InputError("no finite values to plot")
    lo, hi = float(min(finite.min(), 0.0)), float(finite.max())
    if hi == lo:
        hi = lo + 1.0
    x_lo, x_hi = float(x.min()), float(x.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    left, right, top, bottom = MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN

    def px(v):
        return left + (v - x_lo) / (x_hi - x_lo) * (right - left)

    def py(v):
        return bottom - (v - lo) / (hi - lo) * (bottom - top)

    # axes and a faint zero line
    canvas[bottom, left:right + 1] = 0
    canvas[top:bottom + 1, left] = 0
    zero = int(round(py(0.0)))
    if top <= zero < bottom:
        canvas[zero, left + 1:right + 1] = 200
    n, k = series.shape
    if kind == "bar":
        slot = (right - left) / n
        bar = max(1, int(math.floor(slot * 0.8 / k)))
        for i in range(n):
            for j in range(k):
                v = series[i, j]
                if not np.isfinite(v):
                    continue
                x0 = int(left + i * slot + slot * 0.1 + j * bar)
                y0, y1 = sorted((int(round(py(v))), zero))
                canvas[max(y0, top):y1 + 1, x0:x0 + bar] = PALETTE[j % len(PALETTE)]
        return canvas
    order = np.argsort(x, kind="stable")
    for j in range(k):
        colour = PALETTE[j % len(PALETTE)]
        pts = [(px(x[i]), py(series[i, j])) for i in order if np.isfinite(series[i, j])]
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            _line(canvas, x0, y0, x1, y1, colour)
        for x0, y0 in pts:
            xi, yi = int(round(x0)), int(round(y0))
            canvas[max(yi - 2, 0):yi + 3, max(xi - 2, 0):xi + 3] = colour
    return canvas


def plot_csv(path, out, kind="line", columns=None):
    """Render the table at ``path`` into the PPM file ``out``.

    ``columns`` optionally names the series to draw (x is always column 0).
    """
    header, data = load_table(path)
    if columns:
        missing = [c for c in columns if c not in header[1:]]
        if missing:
            raise InputError(f"{path}: no column(s) {missing}")
        idx = [0] + [header.index(c) for c in columns]
        header, data = [header[i] for i in idx], data[:, idx]
    write_ppm(render(header, data, kind), out)
    return out
