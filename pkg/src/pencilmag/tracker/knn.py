"""k-nearest-neighbour regression baseline: pose from the last three readings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..geometry import matrix_to_quat
from ..logs import MagLog, Trace
from ..magmap import WarDriveLog

K_RANGE = (1, 2, 3, 4, 5)
WINDOW = 3


@dataclass
class KnnModel:
    features: np.ndarray  # (n, 9) readings t-2, t-1, t
    poses: np.ndarray  # (n, 6) x, y, qw, qx, qy, qz
    k: int

    def __post_init__(self):
        self._tree = cKDTree(self.features)

    def predict(self, features: np.ndarray) -> np.ndarray:
        k = min(self.k, len(self.features))
        _, idx = self._tree.query(np.atleast_2d(features), k=k)
        idx = np.asarray(idx).reshape(len(np.atleast_2d(features)), k)
        return self.poses[idx].mean(axis=1)


def _windows(t: np.ndarray, values: np.ndarray, max_gap: float):
    """Row indices ending a run of three consecutive samples, with features."""
    gaps_ok = np.diff(t) <= max_gap
    ends = np.nonzero(np.concatenate([[False, False], gaps_ok[:-1] & gaps_ok[1:]]))[0]
    feats = np.hstack([values[ends - 2], values[ends - 1], values[ends]])
    return ends, feats


def _targets(log: WarDriveLog, rows: np.ndarray) -> np.ndarray:
    q = matrix_to_quat(np.swapaxes(log.axes[rows], -1, -2))
    return np.column_stack([log.tip[rows, :2], q])


def knn_fit(log: WarDriveLog, k_range=K_RANGE, holdout: float = 0.2, max_gap: float = 0.03) -> KnnModel:
    """Fit on map-building rows, choosing ``k`` by position error on the
    last ``holdout`` fraction of the windows."""
    ends, feats = _windows(log.t, log.field, max_gap)
    if len(ends) == 0:
        raise ValueError("no run of three consecutive samples in the log")
    poses = _targets(log, ends)
    split = int(len(ends) * (1.0 - holdout))
    best_k = k_range[0]
    if 0 < split < len(ends):
        best_err = np.inf
        for k in k_range:
            m = KnnModel(feats[:split], poses[:split], k)
            err = np.mean(np.sum((m.predict(feats[split:])[:, :2] - poses[split:, :2]) ** 2, axis=1))
            if err < best_err:
                best_k, best_err = k, err
    return KnnModel(feats, poses, best_k)


def knn_track(mag_segment: MagLog, model: KnnModel) -> Trace:
    """Predicted tip path; the first two timestamps reuse the first prediction."""
    v = mag_segment.values
    if len(v) < WINDOW:
        raise ValueError("segment needs at least three samples")
    feats = np.hstack([v[:-2], v[1:-1], v[2:]])
    xy = model.predict(feats)[:, :2]
    xy = np.vstack([xy[:1], xy[:1], xy])
    return Trace(np.asarray(mag_segment.t, dtype=float).copy(), xy)
