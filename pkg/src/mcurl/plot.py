"""Learning-curve SVG plots from run directories' ``metrics.csv``."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")
WIDTH, PANEL_HEIGHT = 640, 320
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 70, 160, 30, 40


def read_metrics(run_dir) -> dict[str, np.ndarray]:
    path = Path(run_dir) / "metrics.csv"
    if not path.is_file():
        raise FileNotFoundError(f"{path} does not exist")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no data rows")
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def run_label(run_dir) -> tuple[str, str]:
    """(group key, display label); runs differing only by seed share a group."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.json"
    if not cfg_path.is_file():
        return str(run_dir), run_dir.name
    with open(cfg_path) as fh:
        cfg = json.load(fh)
    label = re.sub(r"[-_]?seed\d+$", "", cfg.get("run_id", run_dir.name)) or run_dir.name
    cfg.get("train", {}).pop("seed", None)
    for key in ("run_id", "output_dir"):
        cfg.pop(key, None)
    return json.dumps(cfg, sort_keys=True), label


def smooth(values: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; the window shrinks at the edges."""
    if window <= 1 or len(values) == 0:
        return values.copy()
    half = window // 2
    out = np.empty_like(values, dtype=np.float64)
    for i in range(len(values)):
        lo, hi = max(0, i - half), min(len(values), i - half + window)
        out[i] = values[lo:hi].mean()
    return out


@dataclass
class Curve:
    label: str
    steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray | None  # sample std across seeds; None for a single run


def curve_stats(metrics: list[dict], column: str, label: str, window: int = 10) -> Curve:
    common = metrics[0]["env_step"]
    for m in metrics[1:]:
        common = np.intersect1d(common, m["env_step"])
    values = np.stack([m[column][np.isin(m["env_step"], common)] for m in metrics])
    mean = values.mean(axis=0)
    std = values.std(axis=0, ddof=1) if len(metrics) > 1 else None
    return Curve(label, common, smooth(mean, window), None if std is None else smooth(std, window))


def collect_curves(run_dirs, column: str, window: int = 10) -> list[Curve]:
    groups: dict[str, tuple[str, list]] = {}
    for d in run_dirs:
        key, label = run_label(d)
        groups.setdefault(key, (label, []))[1].append(read_metrics(d))
    return [curve_stats(ms, column, label, window) for label, ms in groups.values()]


class Panel:
    """Maps data coordinates of one panel into SVG pixels."""

    def __init__(self, curves: list[Curve], top: float):
        xs = np.concatenate([c.steps for c in curves])
        lows = [c.mean - (c.std if c.std is not None else 0) for c in curves]
        highs = [c.mean + (c.std if c.std is not None else 0) for c in curves]
        self.x0, self.x1 = float(xs.min()), float(xs.max())
        self.y0, self.y1 = float(np.min(np.concatenate(lows))), float(np.max(np.concatenate(highs)))
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        self.left, self.right = MARGIN_LEFT, WIDTH - MARGIN_RIGHT
        self.top, self.bottom = top + MARGIN_TOP, top + PANEL_HEIGHT - MARGIN_BOTTOM

    def px(self, x):
        return self.left + (np.asarray(x, dtype=float) - self.x0) / (self.x1 - self.x0) * (self.right - self.left)

    def py(self, y):
        return self.bottom - (np.asarray(y, dtype=float) - self.y0) / (self.y1 - self.y0) * (self.bottom - self.top)


def _points(xs, ys) -> str:
    return " ".join(f"{x:.3f},{y:.3f}" for x, y in zip(xs, ys))


def render_svg(panels: list[tuple[str, list[Curve]]]) -> str:
    height = PANEL_HEIGHT * len(panels)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
             f'viewBox="0 0 {WIDTH} {height}">',
             f'<rect x="0" y="0" width="{WIDTH}" height="{height}" fill="white"/>']
    for p_idx, (column, curves) in enumerate(panels):
        panel = Panel(curves, p_idx * PANEL_HEIGHT)
        parts.append(f'<g class="panel" data-column={quoteattr(column)}>')
        parts.append(f'<rect x="{panel.left}" y="{panel.top}" width="{panel.right - panel.left}" '
                     f'height="{panel.bottom - panel.top}" fill="none" stroke="#444"/>')
        parts.append(f'<text x="{panel.left}" y="{panel.top - 8}" font-size="13" '
                     f'font-family="sans-serif">{escape(column)}</text>')
        for x, anchor in ((panel.x0, "start"), (panel.x1, "end")):
            parts.append(f'<text x="{panel.px(x):.3f}" y="{panel.bottom + 16}" font-size="11" '
                         f'text-anchor="{anchor}" font-family="sans-serif">{x:g}</text>')
        for y in (panel.y0, panel.y1):
            parts.append(f'<text x="{panel.left - 6}" y="{panel.py(y):.3f}" font-size="11" '
                         f'text-anchor="end" font-family="sans-serif">{y:.4g}</text>')
        parts.append(f'<text x="{(panel.left + panel.right) / 2}" y="{panel.bottom + 32}" font-size="12" '
                     f'text-anchor="middle" font-family="sans-serif">env_step</text>')
        for i, curve in enumerate(curves):
            color = PALETTE[i % len(PALETTE)]
            parts.append(f'<g class="series" data-label={quoteattr(curve.label)}>')
            xs = panel.px(curve.steps)
            if curve.std is not None:
                upper = panel.py(curve.mean + curve.std)
                lower = panel.py(curve.mean - curve.std)
                pts = _points(np.concatenate([xs, xs[::-1]]), np.concatenate([upper, lower[::-1]]))
                parts.append(f'<polygon class="band" points="{pts}" fill="{color}" fill-opacity="0.2" '
                             f'stroke="none"/>')
            parts.append(f'<polyline class="mean" points="{_points(xs, panel.py(curve.mean))}" '
                         f'fill="none" stroke="{color}" stroke-width="1.5"/>')
            ly = panel.top + 14 + 16 * i
            parts.append(f'<text x="{panel.right + 10}" y="{ly}" font-size="11" fill="{color}" '
                         f'font-family="sans-serif">{escape(curve.label)}</text>')
            parts.append("</g>")
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def plot_runs(run_dirs, out_path, columns=("episode_return",), window: int = 10) -> None:
    panels = [(col, collect_curves(run_dirs, col, window)) for col in columns]
    Path(out_path).write_text(render_svg(panels))
