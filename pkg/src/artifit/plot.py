"""Dependency-free SVG convergence plot."""

from __future__ import annotations

import math

_W, _H, _PAD = 640, 220, 48


def _polyline(xs, ys, x0, y0, w, h, colour):
    lo, hi = min(ys), max(ys)
    span = hi - lo if hi > lo else 1.0
    n = max(len(xs) - 1, 1)
    pts = " ".join(f"{x0 + w * x / n:.2f},{y0 + h - h * (y - lo) / span:.2f}"
                   for x, y in zip(xs, ys))
    return (f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>',
            lo, hi)


def _panel(top, title, series):
    x0, w, h = _PAD, _W - 2 * _PAD, _H - 2 * _PAD
    y0 = top + _PAD
    parts = [f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#888"/>',
             f'<text x="{x0}" y="{y0 - 8}" font-size="13">{title}</text>']
    for i, (label, ys, colour) in enumerate(series):
        line, lo, hi = _polyline(range(len(ys)), ys, x0, y0, w, h, colour)
        parts.append(line)
        parts.append(f'<text x="{x0 + w - 4}" y="{y0 + 14 + 14 * i}" font-size="11" '
                     f'text-anchor="end" fill="{colour}">{label} [{lo:.4g}, {hi:.4g}]</text>')
    parts.append(f'<text x="{x0 + w / 2}" y="{y0 + h + 18}" font-size="11" '
                 f'text-anchor="middle">EM iteration</text>')
    return parts


def convergence_svg(trace) -> str:
    """Energy on top, log10 of sigma^2 and the annealed sigma_itr^2 below."""
    if not trace:
        raise ValueError("empty trace")
    energy = [r.energy for r in trace]
    s2 = [math.log10(r.sigma2) for r in trace]
    s2_itr = [math.log10(r.sigma2_itr) for r in trace]
    body = _panel(0, "energy", [("energy", energy, "#1f77b4")])
    body += _panel(_H, "log10 variance", [("sigma2", s2, "#d62728"),
                                          ("sigma2_itr", s2_itr, "#2ca02c")])
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{2 * _H}" '
            f'font-family="sans-serif">\n' + "\n".join(body) + "\n</svg>\n")
