"""Position-only particle filter for a pencil held at a fixed orientation."""

from __future__ import annotations

import numpy as np

from ..logs import MagLog, Trace
from ..magmap import ScreenMap2D, query_2d_batch
from .particles import DegenerateWeightsError, TrackerConfig


def _systematic(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, (rng.random() + np.arange(n)) / n, side="right").clip(max=n - 1)


def track_stroke_2d(mag_segment: MagLog, map2d: ScreenMap2D, cfg: TrackerConfig,
                    rng: np.random.Generator) -> Trace:
    """Random-walk particle filter on the 2D map; the estimate is the
    weighted particle mean at every timestamp."""
    if len(mag_segment) == 0:
        raise ValueError("empty magnetometer segment")
    sigma = cfg.sigma_2d if cfg.sigma_2d is not None else cfg.sigma
    n = cfg.n_particles_2d
    lo = map2d.origin
    hi = map2d.origin + np.asarray(map2d.dims) * map2d.cell_size
    p = rng.uniform(lo, hi, size=(n, 2))
    out = np.empty((len(mag_segment), 2))
    for t, r in enumerate(mag_segment.values):
        if t > 0:
            p = p + rng.normal(0.0, cfg.pos_noise_2d, size=p.shape)
        m = query_2d_batch(map2d, p)
        lw = -np.sum((m - r) ** 2, axis=1) / (2.0 * sigma * sigma)
        lw[~np.isfinite(lw)] = -np.inf
        top = lw.max()
        if not np.isfinite(top):
            raise DegenerateWeightsError("all 2D particles left the map")
        w = np.exp(lw - top)
        w /= w.sum()
        out[t] = w @ p
        p = p[_systematic(w, rng)]
    return Trace(np.asarray(mag_segment.t, dtype=float).copy(), out)
