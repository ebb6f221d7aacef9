"""Static SVG line charts, hand-assembled for byte determinism.

No plotting dependency: the charts here are simple enough (axes, ticks, one
polyline per series, legend) that direct SVG emission is less code than
pinning a plotting stack's output across versions. Data polylines are the
only <polyline> elements, so tests can count series structurally.
"""

from __future__ import annotations

from pathlib import Path

_WIDTH, _HEIGHT = 640, 400
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 64, 150, 36, 48
_PALETTE = ("#1f6fb2", "#d1495b", "#3a9d23", "#8a4fbf", "#e0861a", "#2aa8c8")


def _esc(text: str) -> str:
    return (
        str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
    )


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if n < 2:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def emit_chart(
    series: list[tuple[str, list[tuple[float, float]]]],
    path,
    *,
    title: str = "",
    x_label: str = "",
    y_label: str = "",
) -> Path:
    """Write a line chart; one polyline per series, legend in input order.

    `series` is an ordered list of (label, [(x, y), ...]). Empty input or an
    empty series is an error. Byte-deterministic for identical arguments.
    """
    if not series:
        raise ValueError("series must be nonempty")
    for label, points in series:
        if not points:
            raise ValueError(f"series {label!r} has no points")

    xs = [x for _, pts in series for x, _ in pts]
    ys = [y for _, pts in series for _, y in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 1.0, x_hi + 1.0
    if y_hi == y_lo:
        pad = abs(y_lo) * 0.5 or 1.0
        y_lo, y_hi = y_lo - pad, y_hi + pad

    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B

    def sx(x: float) -> float:
        return _MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y: float) -> float:
        return _MARGIN_T + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}" font-family="monospace" font-size="11">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="#ffffff"/>',
    ]
    if title:
        out.append(
            f'<text x="{_WIDTH // 2}" y="20" text-anchor="middle" font-size="14">'
            f"{_esc(title)}</text>"
        )

    axis_y = _MARGIN_T + plot_h
    out.append(
        f'<line x1="{_MARGIN_L}" y1="{_MARGIN_T}" x2="{_MARGIN_L}" y2="{axis_y}" '
        'stroke="#333333" stroke-width="1"/>'
    )
    out.append(
        f'<line x1="{_MARGIN_L}" y1="{axis_y}" x2="{_MARGIN_L + plot_w}" y2="{axis_y}" '
        'stroke="#333333" stroke-width="1"/>'
    )
    for tick in _ticks(x_lo, x_hi):
        px = sx(tick)
        out.append(
            f'<line x1="{px:.2f}" y1="{axis_y}" x2="{px:.2f}" y2="{axis_y + 5}" '
            'stroke="#333333" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{px:.2f}" y="{axis_y + 18}" text-anchor="middle">'
            f"{_fmt(tick)}</text>"
        )
    for tick in _ticks(y_lo, y_hi):
        py = sy(tick)
        out.append(
            f'<line x1="{_MARGIN_L - 5}" y1="{py:.2f}" x2="{_MARGIN_L}" y2="{py:.2f}" '
            'stroke="#333333" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{_MARGIN_L - 8}" y="{py + 4:.2f}" text-anchor="end">'
            f"{_fmt(tick)}</text>"
        )
    if x_label:
        out.append(
            f'<text x="{_MARGIN_L + plot_w / 2:.2f}" y="{_HEIGHT - 10}" '
            f'text-anchor="middle">{_esc(x_label)}</text>'
        )
    if y_label:
        cy = _MARGIN_T + plot_h / 2
        out.append(
            f'<text x="16" y="{cy:.2f}" text-anchor="middle" '
            f'transform="rotate(-90 16 {cy:.2f})">{_esc(y_label)}</text>'
        )

    legend_x = _MARGIN_L + plot_w + 16
    for i, (label, points) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in points)
        out.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        ly = _MARGIN_T + 12 + i * 16
        out.append(
            f'<line x1="{legend_x}" y1="{ly - 4}" x2="{legend_x + 18}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        out.append(f'<text x="{legend_x + 24}" y="{ly}">{_esc(label)}</text>')

    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path
