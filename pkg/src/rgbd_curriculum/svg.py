"""Minimal deterministic SVG line plots (polylines, axes, legend, vertical markers)."""

from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 60, 160, 40, 50


def _f(v: float) -> str:
    return f"{v:.2f}"


def line_plot(
    series: dict[str, list[tuple[float, float]]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    markers: list[tuple[float, str]] = (),
) -> str:
    """Render ``series`` (name -> [(x, y), ...]) as one polyline each.

    ``markers`` draws dashed vertical lines with a text label at the given x.
    Output depends only on the inputs.
    """
    pts = [p for s in series.values() for p in s]
    xs = [p[0] for p in pts] + [m[0] for m in markers]
    ys = [p[1] for p in pts]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def sx(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return TOP + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
        f'<text x="{LEFT + pw / 2}" y="{H - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="16" y="{TOP + ph / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {TOP + ph / 2})">{escape(ylabel)}</text>',
    ]
    for v, anchor in ((x0, "start"), (x1, "end")):
        out.append(f'<text x="{_f(sx(v))}" y="{TOP + ph + 16}" text-anchor="{anchor}" font-size="10">{v:.3g}</text>')
    for v in (y0, y1):
        out.append(f'<text x="{LEFT - 6}" y="{_f(sy(v) + 4)}" text-anchor="end" font-size="10">{v:.3g}</text>')
    for x, label in markers:
        out.append(
            f'<line x1="{_f(sx(x))}" y1="{TOP}" x2="{_f(sx(x))}" y2="{TOP + ph}" stroke="gray" stroke-dasharray="4 3"/>'
        )
        out.append(f'<text x="{_f(sx(x) + 3)}" y="{TOP + 12}" font-size="10">{escape(label)}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in s)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = TOP + 14 + 18 * i
        out.append(f'<line x1="{W - RIGHT + 12}" y1="{ly}" x2="{W - RIGHT + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - RIGHT + 38}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
