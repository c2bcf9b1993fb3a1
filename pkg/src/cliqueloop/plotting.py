"""Self-contained SVG line charts for PR curves and efficiency sweeps."""

from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 360
MARGIN = 50
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"]


def _scale(v, lo, hi, a, b):
    if hi == lo:
        return (a + b) / 2
    return a + (v - lo) * (b - a) / (hi - lo)


def line_chart(series, title, xlabel, ylabel, xlim=None, ylim=(0.0, 1.0), logx=False):
    """SVG text for ``series`` = ``{label: (xs, ys)}``."""
    import math

    def tx(x):
        return math.log10(x) if logx else x

    xs_all = [tx(x) for xs, _ in series.values() for x in xs]
    if not xs_all:
        raise ValueError("nothing to plot")
    x0, x1 = xlim if xlim else (min(xs_all), max(xs_all))
    if xlim and logx:
        x0, x1 = tx(x0), tx(x1)
    y0, y1 = ylim
    left, right, top, bottom = MARGIN, WIDTH - 20, 30, HEIGHT - MARGIN
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" fill="none" stroke="black"/>',
        f'<text x="{(left + right) / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{(top + bottom) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {(top + bottom) / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for i in range(6):
        yv = y0 + (y1 - y0) * i / 5
        py = _scale(yv, y0, y1, bottom, top)
        out.append(f'<line x1="{left - 4}" y1="{py:.2f}" x2="{left}" y2="{py:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{py + 4:.2f}" text-anchor="end">{yv:.2f}</text>')
        xv = x0 + (x1 - x0) * i / 5
        px = _scale(xv, x0, x1, left, right)
        label = f"{10 ** xv:.3g}" if logx else f"{xv:.3g}"
        out.append(f'<line x1="{px:.2f}" y1="{bottom}" x2="{px:.2f}" y2="{bottom + 4}" stroke="black"/>')
        out.append(f'<text x="{px:.2f}" y="{bottom + 16}" text-anchor="middle">{label}</text>')
    for k, (label, (xs, ys)) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(
            f"{_scale(tx(x), x0, x1, left, right):.2f},{_scale(y, y0, y1, bottom, top):.2f}" for x, y in zip(xs, ys)
        )
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top + 14 + 14 * k
        out.append(f'<text x="{right - 6}" y="{ly}" text-anchor="end" fill="{color}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _read_rows(path, required):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(required) <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns {required}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    try:
        for r in rows:
            for k in required:
                if k != "sequence":
                    float(r[k])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed value ({exc})") from None
    return rows


def plot_pr_curves(paths, out_svg):
    """PR curves from one or more ``threshold,precision,recall`` CSV files."""
    series = {}
    for p in paths:
        rows = _read_rows(p, ["threshold", "precision", "recall"])
        label = Path(p).stem.replace("prcurve_", "")
        series[label] = ([float(r["recall"]) for r in rows], [float(r["precision"]) for r in rows])
    svg = line_chart(series, "Precision-recall", "recall", "precision", xlim=(0.0, 1.0))
    Path(out_svg).write_text(svg)
    return out_svg


def plot_sweep(path, out_svg):
    """AP against verified-candidate count from a ``sweep.csv`` file."""
    rows = _read_rows(path, ["sequence", "candidates", "ap"])
    series = {}
    for r in rows:
        xs, ys = series.setdefault(r["sequence"], ([], []))
        xs.append(float(r["candidates"]))
        ys.append(float(r["ap"]))
    logx = all(x > 0 for xs, _ in series.values() for x in xs)
    svg = line_chart(series, "AP vs verified candidates", "verified candidates", "AP", logx=logx)
    Path(out_svg).write_text(svg)
    return out_svg
