"""CSV and SVG output.

Everything written here is byte-deterministic for fixed input: floats use
17 significant digits, lines end with LF and plots contain no timestamps.
"""

from __future__ import annotations

import csv
import math
import os
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PROFILE_COLUMNS = ("x", "u1", "u2", "u0", "v0", "v1", "v2", "xi1", "xi2")


def format_value(value):
    """17 significant digits for floats, plain text for the rest."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def write_csv(records, schema, path):
    """Write ``records`` (sequences matching ``schema``) with a header row."""
    schema = list(schema)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema)
        for k, rec in enumerate(records):
            rec = list(rec)
            if len(rec) != len(schema):
                raise ValueError(f"record {k} has {len(rec)} fields, schema has {len(schema)}")
            writer.writerow([format_value(v) for v in rec])


def read_csv(path):
    """Header and float rows of a CSV written by :func:`write_csv`."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], [[float(v) for v in row] for row in rows[1:]]


def profile_records(state, spec, mesh):
    xi1 = state.xi(1, spec)
    xi2 = state.xi(2, spec)
    return list(zip(mesh.centers, state.u1, state.u2, state.u0, state.v0, state.v1, state.v2, xi1, xi2))


def write_profile(state, spec, mesh, path):
    """Cell-wise snapshot of densities and potentials."""
    write_csv(profile_records(state, spec, mesh), PROFILE_COLUMNS, path)


def time_tag(t):
    """File-name-safe label of a time, e.g. ``18`` or ``0.25``."""
    return ("%.12g" % t).replace("+", "").replace("-", "m")


# ---------------------------------------------------------------------------
# SVG line plots
# ---------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")
_W, _H = 640, 420
_LEFT, _RIGHT, _TOP, _BOTTOM = 70, 20, 20, 50


def _nice_ticks(lo, hi, n=5):
    span = hi - lo
    raw = span / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return ticks


def _fmt(v):
    return "%.6g" % v


def _finite_points(xs, ys):
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape:
        raise ValueError("x and y of a series must have the same length")
    keep = np.isfinite(xs) & np.isfinite(ys)
    return xs[keep], ys[keep]


def emit_svg_plot(series, xlabel, ylabel, path, title=None):
    """Write a self-contained SVG line plot.

    Parameters
    ----------
    series : sequence of (label, xs, ys)
        One polyline per entry.  Non-finite points are dropped; a series
        with no finite point is an error.
    """
    series = list(series)
    if not series:
        raise ValueError("no series to plot")
    cleaned = []
    for label, xs, ys in series:
        fx, fy = _finite_points(xs, ys)
        if fx.size == 0:
            raise ValueError(f"series {label!r} has no finite points")
        cleaned.append((str(label), fx, fy))
    allx = np.concatenate([c[1] for c in cleaned])
    ally = np.concatenate([c[2] for c in cleaned])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        pad = 0.5 if y0 == 0 else 0.05 * abs(y0)
        y0, y1 = y0 - pad, y1 + pad
    pw, ph = _W - _LEFT - _RIGHT, _H - _TOP - _BOTTOM

    def px(x):
        return _LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return _TOP + (y1 - y) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
           f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>']
    if title:
        out.append(f'<title>{escape(title)}</title>')
    out.append(f'<rect x="{_LEFT}" y="{_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for t in _nice_ticks(x0, x1):
        X = px(t)
        out.append(f'<line x1="{X:.2f}" y1="{_TOP + ph}" x2="{X:.2f}" y2="{_TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{X:.2f}" y="{_TOP + ph + 18}" font-size="11" text-anchor="middle">{_fmt(t)}</text>')
    for t in _nice_ticks(y0, y1):
        Y = py(t)
        out.append(f'<line x1="{_LEFT - 5}" y1="{Y:.2f}" x2="{_LEFT}" y2="{Y:.2f}" stroke="black"/>')
        out.append(f'<text x="{_LEFT - 8}" y="{Y + 4:.2f}" font-size="11" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{_LEFT + pw / 2:.2f}" y="{_H - 10}" font-size="13" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{_TOP + ph / 2:.2f}" font-size="13" text-anchor="middle" '
               f'transform="rotate(-90 15 {_TOP + ph / 2:.2f})">{escape(ylabel)}</text>')
    for k, (label, fx, fy) in enumerate(cleaned):
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(fx, fy))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
    # legend, top right inside the frame
    lx = _LEFT + pw - 150
    for k, (label, _, _) in enumerate(cleaned):
        color = _COLORS[k % len(_COLORS)]
        y = _TOP + 15 + 16 * k
        out.append(f'<g class="legend-entry"><line x1="{lx}" y1="{y}" x2="{lx + 20}" y2="{y}" '
                   f'stroke="{color}" stroke-width="2"/>'
                   f'<text x="{lx + 26}" y="{y + 4}" font-size="11">{escape(label)}</text></g>')
    out.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")


def default_output_dir():
    """``$VDPCM_OUT`` if set, else ``./vdpcm_out``."""
    return Path(os.environ.get("VDPCM_OUT", "vdpcm_out"))
