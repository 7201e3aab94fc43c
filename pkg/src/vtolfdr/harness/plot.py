"""SVG line charts of a telemetry table.

Every polyline carries the affine map from data to pixels in ``data-*``
attributes, so the plotted numbers can be recovered from the file with
:func:`read_svg_series`.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape, quoteattr

import numpy as np

WIDTH, HEIGHT = 900, 340
MARGIN = (70, 20, 30, 45)  # left, right, top, bottom
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#000000")
_NUM = "{:.12g}"


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray
    x_column: str
    y_column: str


@dataclass
class Chart:
    title: str
    x_label: str
    y_label: str
    series: list[Series]
    hlines: Sequence[float] = ()


def _range(values: list[np.ndarray]) -> tuple[float, float]:
    finite = [v[np.isfinite(v)] for v in values]
    finite = [v for v in finite if v.size]
    if not finite:
        return 0.0, 1.0
    lo = min(float(v.min()) for v in finite)
    hi = max(float(v.max()) for v in finite)
    if hi - lo < 1e-12 * max(1.0, abs(hi)):
        pad = max(1.0, abs(hi)) * 0.05
        return lo - pad, hi + pad
    return lo, hi


def _segments(x: np.ndarray, y: np.ndarray):
    ok = np.isfinite(x) & np.isfinite(y)
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return
    breaks = np.flatnonzero(np.diff(idx) > 1) + 1
    for part in np.split(idx, breaks):
        yield part


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    span = hi - lo
    step = 10 ** math.floor(math.log10(span / n))
    for m in (1, 2, 5, 10):
        if span / (m * step) <= n:
            step *= m
            break
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def render_chart(chart: Chart, y_offset: float = 0.0, width: int = WIDTH, height: int = HEIGHT) -> str:
    left, right, top, bottom = MARGIN
    pw, ph = width - left - right, height - top - bottom
    x0, x1 = _range([s.x for s in chart.series])
    y0, y1 = _range([s.y for s in chart.series] + [np.asarray(chart.hlines, dtype=float)])
    sx, sy = pw / (x1 - x0), ph / (y1 - y0)
    px0, py0 = left, y_offset + top + ph  # pixel position of (x0, y0)

    out = ['<g class="chart">',
           f'<text x="{left}" y="{y_offset + top - 6}" font-size="13">{escape(chart.title)}</text>',
           f'<rect x="{left}" y="{y_offset + top}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>']
    for t in _ticks(x0, x1):
        px = px0 + (t - x0) * sx
        out.append(f'<line x1="{px:.2f}" y1="{py0}" x2="{px:.2f}" y2="{py0 + 4}" stroke="#999"/>'
                   f'<text x="{px:.2f}" y="{py0 + 16}" font-size="10" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        py = py0 - (t - y0) * sy
        out.append(f'<line x1="{left - 4}" y1="{py:.2f}" x2="{left}" y2="{py:.2f}" stroke="#999"/>'
                   f'<text x="{left - 6}" y="{py + 3:.2f}" font-size="10" text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{py0 + 32}" font-size="11" text-anchor="middle">{escape(chart.x_label)}</text>')
    out.append(f'<text x="14" y="{y_offset + top + ph / 2}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 14 {y_offset + top + ph / 2})">{escape(chart.y_label)}</text>')
    for h in chart.hlines:
        py = py0 - (h - y0) * sy
        out.append(f'<line class="threshold" x1="{left}" y1="{py:.2f}" x2="{left + pw}" y2="{py:.2f}" '
                   f'stroke="#555" stroke-dasharray="5,4"/>')

    for k, s in enumerate(chart.series):
        color = PALETTE[k % len(PALETTE)]
        for part in _segments(s.x, s.y):
            pts = " ".join(f"{_NUM.format(px0 + (s.x[i] - x0) * sx)},{_NUM.format(py0 - (s.y[i] - y0) * sy)}"
                           for i in part)
            attrs = {
                "data-label": s.label, "data-x-column": s.x_column, "data-y-column": s.y_column,
                "data-x0": repr(x0), "data-y0": repr(y0), "data-sx": repr(sx), "data-sy": repr(sy),
                "data-px0": repr(float(px0)), "data-py0": repr(float(py0)), "data-first-row": str(int(part[0])),
            }
            attr_txt = " ".join(f"{k_}={quoteattr(v)}" for k_, v in attrs.items())
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" {attr_txt} points="{pts}"/>')
        ly = y_offset + top + 14 + 14 * k
        out.append(f'<text x="{left + pw - 8}" y="{ly}" font-size="10" text-anchor="end" fill="{color}">'
                   f'{escape(s.label)}</text>')
    out.append("</g>")
    return "\n".join(out)


def render_svg(charts: Sequence[Chart], width: int = WIDTH, height: int = HEIGHT) -> str:
    total = height * len(charts)
    body = [render_chart(c, i * height, width, height) for i, c in enumerate(charts)]
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total}" '
            f'viewBox="0 0 {width} {total}">\n<rect width="100%" height="100%" fill="white"/>\n'
            + "\n".join(body) + "\n</svg>\n")


def _time_series(log: Mapping[str, np.ndarray], cols: Sequence[str], labels: Sequence[str] | None = None) -> list[Series]:
    t = np.asarray(log["time"], dtype=float)
    labels = list(cols) if labels is None else list(labels)
    return [Series(lab, t, np.asarray(log[c], dtype=float), "time", c) for c, lab in zip(cols, labels) if c in log]


def telemetry_charts(log: Mapping[str, np.ndarray], threshold: float | None = 5.0) -> dict[str, list[Chart]]:
    """Chart sets keyed by output file stem; a set is left out when its columns are missing."""
    if "time" not in log:
        raise KeyError("time")
    sets: dict[str, list[Chart]] = {}
    z_cols = [c for c in log if c.startswith("z_")]
    if z_cols:
        sets["zscore"] = [Chart("Residual z-score", "time [s]", "z", _time_series(log, z_cols),
                                () if threshold is None else (threshold, -threshold))]
    u_sp = [c for c in log if c.startswith("u_sp_")]
    if u_sp:
        groups = [(("motor",), "Motor commands", "command [-]"), (("tilt",), "Tilt commands", "angle [rad]"),
                  (("aileron", "elevator"), "Surface commands", "angle [rad]")]
        charts, used = [], set()
        for keys, title, unit in groups:
            cols = [c for c in u_sp if any(k in c for k in keys)]
            used.update(cols)
            if cols:
                charts.append(Chart(title, "time [s]", unit, _time_series(log, cols, [c[5:] for c in cols])))
        other = [c for c in u_sp if c not in used]
        if other:
            charts.append(Chart("Other commands", "time [s]", "command", _time_series(log, other, [c[5:] for c in other])))
        sets["commands"] = charts
    att = [c for c in ("roll", "pitch", "yaw", "att_err") if c in log]
    if att:
        sets["attitude"] = [Chart("Attitude", "time [s]", "angle [rad]", _time_series(log, att))]
    if all(c in log for c in ("x", "y", "z")):
        x, y = np.asarray(log["x"], dtype=float), np.asarray(log["y"], dtype=float)
        sets["path"] = [
            Chart("Ground track", "x east [m]", "y north [m]", [Series("track", x, y, "x", "y")]),
            Chart("Altitude", "time [s]", "z up [m]", _time_series(log, ["z"])),
        ]
    return sets


def write_plots(log: Mapping[str, np.ndarray], out_dir: str | Path, threshold: float | None = 5.0) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for stem, charts in telemetry_charts(log, threshold).items():
        p = out / f"{stem}.svg"
        p.write_text(render_svg(charts), encoding="utf-8")
        paths.append(p)
    return paths


def read_svg_series(path: str | Path) -> dict[str, dict[str, np.ndarray]]:
    """Recover plotted data from an SVG written here: ``{y_column: {"row", "x", "y"}}``.

    Series sharing a y column (there are none in the standard chart sets) are merged.
    """
    root = ET.parse(path).getroot()
    out: dict[str, dict[str, list]] = {}
    for el in root.iter():
        if not el.tag.endswith("polyline") or "data-y-column" not in el.attrib:
            continue
        a = el.attrib
        x0, y0, sx, sy = (float(a[k]) for k in ("data-x0", "data-y0", "data-sx", "data-sy"))
        px0, py0 = float(a["data-px0"]), float(a["data-py0"])
        pts = np.array([[float(v) for v in p.split(",")] for p in a["points"].split()])
        first = int(a["data-first-row"])
        d = out.setdefault(a["data-y-column"], {"row": [], "x": [], "y": []})
        d["row"].extend(range(first, first + len(pts)))
        d["x"].extend(x0 + (pts[:, 0] - px0) / sx)
        d["y"].extend(y0 + (py0 - pts[:, 1]) / sy)
    return {k: {kk: np.asarray(vv) for kk, vv in v.items()} for k, v in out.items()}
