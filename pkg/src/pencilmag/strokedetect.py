"""Two-step stroke segmentation.

Rough intervals come from a sliding variance of the magnetometer stream.
Each boundary is then snapped to the touch-down or lift-off vibration
visible in the accelerometer and gyroscope magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .logs import ImuLog, MagLog

MAD_TO_SIGMA = 1.4826


@dataclass(frozen=True)
class StrokeWindowConfig:
    window: int = 100  # samples
    variance_threshold: float = 0.12  # uT^2, summed over axes

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be at least 2 samples")
        if self.variance_threshold <= 0:
            raise ValueError("variance threshold must be positive")


@dataclass(frozen=True)
class ImuPeakConfig:
    """Peak thresholds on baseline-removed IMU magnitudes.

    A threshold left as ``None`` is set to ``noise_multiplier`` times the
    robust (MAD) noise scale of the stream it applies to.
    """

    accel_threshold: float | None = None  # m/s^2
    gyro_threshold: float | None = None  # rad/s
    search_margin: int = 25  # IMU samples
    noise_multiplier: float = 6.0

    def __post_init__(self):
        for v in (self.accel_threshold, self.gyro_threshold):
            if v is not None and v <= 0:
                raise ValueError("IMU thresholds must be positive")
        if self.search_margin < 0 or self.noise_multiplier <= 0:
            raise ValueError("search margin must be >= 0 and the multiplier positive")


@dataclass(frozen=True)
class StrokeInterval:
    begin: float
    end: float

    def __post_init__(self):
        if not self.begin < self.end:
            raise ValueError(f"stroke must have begin < end, got {self.begin} >= {self.end}")

    def shifted(self, dt: float) -> "StrokeInterval":
        return StrokeInterval(self.begin + dt, self.end + dt)


def window_variance(values: np.ndarray, window: int) -> np.ndarray:
    """Per-axis variance summed over axes for every full window position."""
    win = sliding_window_view(np.asarray(values, dtype=float), window, axis=0)
    return win.var(axis=-1).sum(axis=-1)


def rough_strokes(mag: MagLog, cfg: StrokeWindowConfig = StrokeWindowConfig(), ambient=None) -> list[StrokeInterval]:
    """Intervals between the window midpoints where the variance rises above
    and falls back below the threshold."""
    n = len(mag)
    if n < cfg.window:
        return []
    values = mag.values if ambient is None else mag.values - np.asarray(ambient, dtype=float)
    above = window_variance(values, cfg.window) > cfg.variance_threshold
    edges = np.diff(np.concatenate([[0], above.astype(np.int8), [0]]))
    starts = np.nonzero(edges == 1)[0]
    stops = np.nonzero(edges == -1)[0]  # first window back below (or one past the last)
    half = cfg.window // 2
    out = []
    for a, b in zip(starts, stops):
        begin = mag.t[a + half]
        end = mag.t[min(b + half, n - 1)]
        if end > begin:
            out.append(StrokeInterval(float(begin), float(end)))
    return out


def robust_scale(x: np.ndarray) -> float:
    return float(MAD_TO_SIGMA * np.median(np.abs(x - np.median(x))))


def _deviation(log: ImuLog) -> np.ndarray:
    mag = np.linalg.norm(log.values, axis=1)
    return mag - np.median(mag)


def _peaks(dev: np.ndarray, given: float | None, mult: float) -> np.ndarray:
    if given is None:
        scale = robust_scale(dev)
        given = mult * scale if scale > 0 else np.inf
    return np.abs(dev) > given


def refine_strokes(rough: list[StrokeInterval], accel: ImuLog, gyro: ImuLog,
                   cfg: ImuPeakConfig = ImuPeakConfig()) -> list[StrokeInterval]:
    """Snap each boundary to the first/last IMU peak within the rough
    interval widened by ``search_margin`` samples; keep it when none is found."""
    if not rough:
        return []
    da, dg = _deviation(accel), _deviation(gyro)
    peak_a = _peaks(da, cfg.accel_threshold, cfg.noise_multiplier)
    peak_g = _peaks(dg, cfg.gyro_threshold, cfg.noise_multiplier)
    peak_t = np.union1d(accel.t[peak_a], gyro.t[peak_g])
    dt = float(np.median(np.diff(accel.t))) if len(accel) > 1 else 0.0
    margin = cfg.search_margin * dt
    out = []
    for iv in sorted(rough, key=lambda r: r.begin):
        lo, hi = iv.begin - margin, iv.end + margin
        inside = peak_t[(peak_t >= lo) & (peak_t <= hi)]
        begin, end = iv.begin, iv.end
        if inside.size:
            begin, end = float(inside[0]), float(inside[-1])
        if end <= begin:
            begin, end = iv.begin, iv.end
        if out and begin <= out[-1].end:
            begin = iv.begin if iv.begin > out[-1].end else np.nextafter(out[-1].end, np.inf)
            if end <= begin:
                continue
        out.append(StrokeInterval(begin, end))
    return out


def detect_strokes(mag: MagLog, accel: ImuLog, gyro: ImuLog,
                   window_cfg: StrokeWindowConfig = StrokeWindowConfig(),
                   peak_cfg: ImuPeakConfig = ImuPeakConfig(), ambient=None) -> list[StrokeInterval]:
    return refine_strokes(rough_strokes(mag, window_cfg, ambient), accel, gyro, peak_cfg)
