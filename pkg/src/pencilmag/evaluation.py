"""Trace metrics and SVG rendering."""

from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import quoteattr

import numpy as np

from .geometry import ScreenConfig
from .logs import Trace

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


@dataclass(frozen=True)
class Metrics:
    rmse_mm: float
    aligned_rmse_mm: float
    n: int
    scale: float

    def to_dict(self) -> dict:
        return {"rmse_mm": self.rmse_mm, "aligned_rmse_mm": self.aligned_rmse_mm,
                "n": self.n, "scale": self.scale}


def common_timeline(trace: Trace, truth: Trace) -> tuple[np.ndarray, np.ndarray]:
    """Both paths sampled at the trace timestamps that fall inside the truth span.

    Truth is linearly interpolated; identical timelines pass through unchanged.
    """
    if len(trace) < 2 or len(truth) < 2:
        raise ValueError("traces need at least two samples")
    if len(trace) == len(truth) and np.array_equal(trace.t, truth.t):
        return np.asarray(trace.xy, float), np.asarray(truth.xy, float)
    t = np.asarray(trace.t, float)
    keep = (t >= truth.t[0]) & (t <= truth.t[-1])
    if keep.sum() < 2:
        raise ValueError("traces overlap in fewer than two samples")
    t = t[keep]
    ref = np.column_stack([np.interp(t, truth.t, truth.xy[:, k]) for k in range(2)])
    return np.asarray(trace.xy, float)[keep], ref


def similarity_align(src: np.ndarray, dst: np.ndarray):
    """Least-squares ``scale, R, shift`` with ``det R = +1`` mapping ``src`` onto ``dst``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    var = np.sum(a * a) / len(a)
    u, s, vt = np.linalg.svd(b.T @ a / len(a))
    d = np.ones(len(s))
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = float(np.sum(s * d) / var) if var > 0 else 1.0
    return scale, rot, mu_d - scale * rot @ mu_s


def run_eval(trace: Trace, truth: Trace) -> Metrics:
    est, ref = common_timeline(trace, truth)
    raw = float(np.sqrt(np.mean(np.sum((est - ref) ** 2, axis=1))))
    scale, rot, shift = similarity_align(est, ref)
    fit = scale * est @ rot.T + shift
    aligned = float(np.sqrt(np.mean(np.sum((fit - ref) ** 2, axis=1))))
    return Metrics(raw, aligned, len(est), scale)


def render_trace(traces, screen: ScreenConfig, path, stroke_width: float = 0.8) -> str:
    """Write an SVG whose user units are millimetres on the screen.

    The screen outline is drawn as a rectangle, each trace as one polyline.
    Returns the document text.
    """
    w, h = screen.width, screen.height
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}mm" height="{h}mm" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="none" stroke="#000000" stroke-width="0.5"/>',
    ]
    for i, tr in enumerate(traces):
        pts = " ".join(f"{x:.3f},{y:.3f}" for x, y in np.asarray(tr.xy, float))
        colour = PALETTE[i % len(PALETTE)]
        parts.append(f'<polyline points={quoteattr(pts)} fill="none" stroke="{colour}" '
                     f'stroke-width="{stroke_width}" stroke-linejoin="round"/>')
    parts.append("</svg>")
    doc = "\n".join(parts) + "\n"
    with open(path, "w") as fh:
        fh.write(doc)
    return doc
