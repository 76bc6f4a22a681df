"""Kalman filtering and smoothing of noisy orientation tracks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import hemisphere_align


@dataclass
class QuatTrack:
    t: np.ndarray
    quats: np.ndarray  # (n, 4)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.quats = np.asarray(self.quats, dtype=float)
        if len(self.t) != len(self.quats):
            raise ValueError("timestamps and quaternions differ in length")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must be strictly increasing")


@dataclass(frozen=True)
class KalmanParams:
    process_var: float = 1e-4
    observation_var: float = 1e-2

    def __post_init__(self):
        if self.process_var <= 0 or self.observation_var <= 0:
            raise ValueError("variances must be positive")


def kalman_smooth_quats(track: QuatTrack, params: KalmanParams | None = None) -> QuatTrack:
    """Random-walk Kalman filter plus Rauch-Tung-Striebel pass, per component.

    The track is first made sign-consistent (consecutive dot products >= 0),
    then each of the four components is filtered independently and the
    result renormalised.
    """
    params = params or KalmanParams()
    z = hemisphere_align(track.quats)
    n = len(z)
    if n < 2:
        raise ValueError("need at least two samples to smooth")
    q, r = params.process_var, params.observation_var

    # covariances are identical for every component, so track them as scalars
    x_f = np.empty_like(z)
    p_f = np.empty(n)
    p_pred = np.empty(n)
    x, p = z[0].copy(), r
    x_f[0], p_f[0], p_pred[0] = x, p, r
    for k in range(1, n):
        pp = p + q
        gain = pp / (pp + r)
        x = x + gain * (z[k] - x)
        p = (1.0 - gain) * pp
        x_f[k], p_f[k], p_pred[k] = x, p, pp

    x_s = x_f.copy()
    for k in range(n - 2, -1, -1):
        c = p_f[k] / p_pred[k + 1]
        x_s[k] = x_f[k] + c * (x_s[k + 1] - x_f[k])

    x_s /= np.linalg.norm(x_s, axis=1, keepdims=True)
    return QuatTrack(track.t.copy(), x_s)
