"""SVG drawing of a layout on the table.

Table units map to SVG user units by ``x_svg = margin + scale * x`` and
``y_svg = margin + scale * (width - y)`` (y axis points up, as on the table diagram).
Ball groups carry that affine in their ``transform`` so circle centres are the
data coordinates themselves.
"""
from __future__ import annotations

from xml.sax.saxutils import escape

from .core import Layout, TableGeometry

BALL_COLORS = {
    0: "#ffffff",
    1: "#f7d417",
    2: "#1f4fbf",
    3: "#d62020",
    4: "#5b2a86",
    5: "#f07c1b",
    6: "#178a3a",
    7: "#7a1f1f",
    8: "#111111",
    9: "#f7d417",
}


def _num(v: float) -> str:
    return f"{v:.4f}".rstrip("0").rstrip(".")


def render_svg(layout: Layout, geom: TableGeometry = TableGeometry(), scale: float = 4.0, margin: float = 20.0) -> str:
    L, W, r = geom.length, geom.width, geom.ball_radius
    width = 2 * margin + scale * L
    height = 2 * margin + scale * W
    affine = f"matrix({_num(scale)} 0 0 {_num(-scale)} {_num(margin)} {_num(margin + scale * W)})"
    pr = 2.0 * r  # pocket mouth radius
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_num(width)}" height="{_num(height)}" '
        f'viewBox="0 0 {_num(width)} {_num(height)}">',
        f"<title>{escape(layout.id)}</title>",
        f'<desc>affine: {affine}</desc>',
        f'<rect x="0" y="0" width="{_num(width)}" height="{_num(height)}" fill="#5a3a1a"/>',
        f'<g id="table" transform="{affine}">',
        f'<rect class="cloth" x="0" y="0" width="{_num(L)}" height="{_num(W)}" fill="#0f6b3a"/>',
    ]
    # corner pockets are quarter arcs, middle pockets half arcs, all opening into the table
    for j, (px, py) in enumerate(geom.pockets, start=1):
        sx = 1 if px < L / 2 else -1
        sy = 1 if py < W / 2 else -1
        if j in (3, 6):
            d = f"M {_num(px - pr)} {_num(py)} A {_num(pr)} {_num(pr)} 0 0 {1 if sy < 0 else 0} {_num(px + pr)} {_num(py)} Z"
        else:
            d = (f"M {_num(px)} {_num(py)} L {_num(px + sx * pr)} {_num(py)} "
                 f"A {_num(pr)} {_num(pr)} 0 0 {1 if sx * sy > 0 else 0} {_num(px)} {_num(py + sy * pr)} Z")
        out.append(f'<path class="pocket" data-pocket="{j}" d="{d}" fill="#000000"/>')
    out.append("</g>")
    out.append(f'<g id="balls" transform="{affine}">')
    for b in layout.canonical().balls:
        color = BALL_COLORS.get(b.number, "#cccccc")
        out.append(f'<g class="ball" data-num="{b.number}">')
        if b.number == 9:
            out.append(f'<clipPath id="clip9"><circle cx="{_num(b.x)}" cy="{_num(b.y)}" r="{_num(r)}"/></clipPath>')
            out.append(f'<circle cx="{_num(b.x)}" cy="{_num(b.y)}" r="{_num(r)}" fill="#ffffff" stroke="#000000" stroke-width="0.15"/>')
            out.append(f'<rect x="{_num(b.x - r)}" y="{_num(b.y - r / 2)}" width="{_num(2 * r)}" height="{_num(r)}" '
                       f'fill="{color}" clip-path="url(#clip9)"/>')
        else:
            out.append(f'<circle cx="{_num(b.x)}" cy="{_num(b.y)}" r="{_num(r)}" fill="{color}" stroke="#000000" stroke-width="0.15"/>')
        if b.number:
            # undo the y flip locally so the digit reads upright
            out.append(f'<text transform="translate({_num(b.x)} {_num(b.y)}) scale(1 -1)" font-size="{_num(1.6 * r)}" '
                       f'text-anchor="middle" dominant-baseline="central" font-family="sans-serif" '
                       f'fill="{"#ffffff" if b.number in (2, 4, 7, 8) else "#000000"}">{b.number}</text>')
        out.append("</g>")
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
