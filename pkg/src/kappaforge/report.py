"""Self-contained SVG heatmaps and share charts, plus their CSV twins.

Output is a pure function of the inputs (no timestamps, stable element
order) so artifacts can be compared byte-for-byte.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape, quoteattr

from .agreement import AgreementMatrix
from .runner import ShareTable


class ReportError(Exception):
    pass


class EmptyMatrix(ReportError):
    pass


class EmptyInput(ReportError):
    pass


DEFAULT_ANCHORS = ((0.0, "#f7fbff"), (0.5, "#6baed6"), (1.0, "#08306b"))
FONT = "font-family=\"Helvetica, Arial, sans-serif\""


@dataclass(frozen=True)
class HeatmapSpec:
    matrix: AgreementMatrix
    metric: str = "kappa"
    anchors: tuple[tuple[float, str], ...] = DEFAULT_ANCHORS
    precision: int = 2
    title: str = ""

    def __post_init__(self):
        if self.metric not in ("kappa", "observed"):
            raise ReportError(f"unknown metric {self.metric!r}")


def _rgb(hex_color: str) -> tuple[int, int, int]:
    h = hex_color.lstrip("#")
    return int(h[0:2], 16), int(h[2:4], 16), int(h[4:6], 16)


def color_for(value: float, anchors: Sequence[tuple[float, str]]) -> str:
    """Piecewise-linear interpolation between anchor colors, clamped at the ends."""
    if value <= anchors[0][0]:
        return anchors[0][1]
    for (x0, c0), (x1, c1) in zip(anchors, anchors[1:]):
        if value <= x1:
            t = (value - x0) / (x1 - x0)
            rgb = [round(a + (b - a) * t) for a, b in zip(_rgb(c0), _rgb(c1))]
            return "#{:02x}{:02x}{:02x}".format(*rgb)
    return anchors[-1][1]


def _luminance(hex_color: str) -> float:
    r, g, b = _rgb(hex_color)
    return (0.299 * r + 0.587 * g + 0.114 * b) / 255


def emit_heatmap(spec: HeatmapSpec) -> str:
    coders = spec.matrix.coders
    if len(coders) < 2:
        raise EmptyMatrix("heatmap needs at least two coders")
    grid = getattr(spec.matrix, spec.metric)
    cell = 64
    left = 16 + 7 * max(len(c) for c in coders)
    top = 40 + 7 * max(len(c) for c in coders)
    size = len(coders) * cell
    width, height = left + size + 16, top + size + 16
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        "<defs>",
        '<pattern id="hatch" patternUnits="userSpaceOnUse" width="8" height="8" patternTransform="rotate(45)">'
        '<rect width="8" height="8" fill="#ffffff"/><line x1="0" y1="0" x2="0" y2="8" stroke="#999999" stroke-width="3"/>'
        "</pattern>",
        "</defs>",
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if spec.title:
        out.append(f'<text x="{width // 2}" y="20" text-anchor="middle" font-size="14" {FONT}>{escape(spec.title)}</text>')
    for i, name in enumerate(coders):
        y = top + i * cell + cell // 2 + 4
        out.append(f'<text x="{left - 8}" y="{y}" text-anchor="end" font-size="12" {FONT}>{escape(name)}</text>')
        x = left + i * cell + cell // 2
        out.append(
            f'<text x="{x}" y="{top - 8}" text-anchor="start" font-size="12" {FONT} '
            f'transform="rotate(-60 {x} {top - 8})">{escape(name)}</text>'
        )
    for i in range(len(coders)):
        for j in range(len(coders)):
            x, y = left + j * cell, top + i * cell
            value = grid[i][j]
            if value is None:
                out.append(f'<rect class="unavailable" x="{x}" y="{y}" width="{cell}" height="{cell}" fill="url(#hatch)" stroke="#ffffff"/>')
                continue
            fill = color_for(value, spec.anchors)
            ink = "#ffffff" if _luminance(fill) < 0.5 else "#000000"
            label = f"{value:.{spec.precision}f}"
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#ffffff"/>')
            out.append(
                f'<text class="value" x="{x + cell // 2}" y="{y + cell // 2 + 5}" text-anchor="middle" '
                f'font-size="13" fill="{ink}" {FONT}>{label}</text>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def share_csv(tables: Sequence[ShareTable]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["cell", "task", "label", "count", "percent", "denominator", "failures"])
    for table in tables:
        for label in table.labels:
            pct = table.percents[label] if table.percents else "NA"
            writer.writerow([table.cell_id, table.task.value, label, table.counts[label], pct, table.denominator, table.n_failures])
    return buf.getvalue()


_PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


def emit_share_chart(tables: "ShareTable | Sequence[ShareTable]", title: str = "") -> tuple[str, str]:
    """Grouped bar chart (one group per table, one bar per label) and CSV."""
    if isinstance(tables, ShareTable):
        tables = [tables]
    tables = [t for t in tables if t.denominator > 0]
    if not tables:
        raise EmptyInput("no share table with labeled records")
    labels = list(dict.fromkeys(lab for t in tables for lab in t.labels))
    bar, gap = 36, 28
    plot_h, left, top = 220, 56, 40
    group_w = []
    for t in tables:
        shown = [lab for lab in t.labels if t.counts[lab] > 0]
        group_w.append(max(len(shown) * bar, 7 * len(t.cell_id)))
    width = left + sum(group_w) + gap * (len(tables) + 1)
    caption_y = top + plot_h + 36
    height = caption_y + 18 * len(tables) + 40
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if title:
        out.append(f'<text x="{width // 2}" y="20" text-anchor="middle" font-size="14" {FONT}>{escape(title)}</text>')
    base_y = top + plot_h
    out.append(f'<line x1="{left}" y1="{base_y}" x2="{width - gap // 2}" y2="{base_y}" stroke="#333333"/>')
    for tick in (0, 25, 50, 75, 100):
        y = base_y - plot_h * tick / 100
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="10" {FONT}>{tick}</text>')
    x = left + gap
    for t, w in zip(tables, group_w):
        shown = [lab for lab in t.labels if t.counts[lab] > 0]
        bx = x + (w - len(shown) * bar) // 2
        for lab in shown:
            pct = t.percents[lab]
            h = plot_h * float(pct) / 100
            color = _PALETTE[labels.index(lab) % len(_PALETTE)]
            out.append(
                f'<rect class="bar" data-label={quoteattr(lab)} x="{bx + 3}" y="{base_y - h:.2f}" '
                f'width="{bar - 6}" height="{h:.2f}" fill="{color}"/>'
            )
            out.append(f'<text class="value" x="{bx + bar // 2}" y="{base_y - h - 4:.2f}" text-anchor="middle" font-size="11" {FONT}>{pct}</text>')
            out.append(f'<text x="{bx + bar // 2}" y="{base_y + 14}" text-anchor="middle" font-size="10" {FONT}>{escape(lab)}</text>')
            bx += bar
        out.append(f'<text x="{x + w // 2}" y="{base_y + 28}" text-anchor="middle" font-size="11" {FONT}>{escape(t.cell_id)}</text>')
        x += w + gap
    for i, t in enumerate(tables):
        caption = f"{t.cell_id}: N = {t.denominator}"
        if t.n_failures:
            caption += f"; excluded: {t.n_failures} failures"
        out.append(f'<text class="caption" x="{left}" y="{caption_y + 18 * i}" font-size="11" {FONT}>{escape(caption)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n", share_csv(tables)
