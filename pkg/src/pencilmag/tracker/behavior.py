"""Writing-behaviour model: linear prediction of the next state change."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from ..geometry import hemisphere_align
from ..logs import PoseLog

log = logging.getLogger(__name__)

STATE_DIM = 6
WINDOW = 3
FEATURE_DIM = WINDOW * STATE_DIM
RIDGE = 1e-6
RANK_RTOL = 1e-6  # singular values below this fraction of the largest count as zero
MIN_WINDOWS = 100


@dataclass
class WritingBehaviorModel:
    """``delta_t = features @ coef + intercept`` where ``features`` is the
    previous three state deltas, oldest first (18 values)."""

    coef: np.ndarray  # (18, 6)
    intercept: np.ndarray  # (6,)
    ridge: bool = False

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=float).reshape(FEATURE_DIM, STATE_DIM)
        self.intercept = np.asarray(self.intercept, dtype=float).reshape(STATE_DIM)
        if not (np.all(np.isfinite(self.coef)) and np.all(np.isfinite(self.intercept))):
            raise ValueError("behaviour model coefficients must be finite")

    @classmethod
    def zero(cls) -> "WritingBehaviorModel":
        return cls(np.zeros((FEATURE_DIM, STATE_DIM)), np.zeros(STATE_DIM))

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features) @ self.coef + self.intercept

    def to_dict(self) -> dict:
        return {
            "format": "pencilmag.behavior",
            "version": 1,
            "coef": self.coef.tolist(),
            "intercept": self.intercept.tolist(),
            "ridge": bool(self.ridge),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "WritingBehaviorModel":
        return cls(np.asarray(doc["coef"]), np.asarray(doc["intercept"]), bool(doc.get("ridge", False)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "WritingBehaviorModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def pose_states(pose: PoseLog) -> np.ndarray:
    """``(n, 6)`` states ``(x, y, qw, qx, qy, qz)`` with a sign-consistent quaternion track."""
    return np.column_stack([pose.xy, hemisphere_align(pose.quats)])


def delta_windows(states: np.ndarray):
    """Regression pairs from one contiguous state sequence."""
    d = np.diff(states, axis=0)
    if len(d) <= WINDOW:
        return np.zeros((0, FEATURE_DIM)), np.zeros((0, STATE_DIM))
    x = np.hstack([d[i:len(d) - WINDOW + i] for i in range(WINDOW)])
    return x, d[WINDOW:]


def fit_behavior_model(training, max_gap: float = 0.03) -> WritingBehaviorModel:
    """Least-squares fit over every pen-down segment of the training pose logs.

    ``training`` is a PoseLog or a sequence of them; segments are split at
    gaps longer than ``max_gap`` seconds. A rank-deficient design falls back
    to ridge regression (lambda = 1e-6) and sets ``ridge``; numerically
    near-singular designs count as rank-deficient.
    """
    if isinstance(training, PoseLog):
        training = [training]
    xs, ys = [], []
    for pose in training:
        for seg in pose.segments(max_gap):
            x, y = delta_windows(pose_states(seg))
            xs.append(x)
            ys.append(y)
    x = np.vstack(xs) if xs else np.zeros((0, FEATURE_DIM))
    y = np.vstack(ys) if ys else np.zeros((0, STATE_DIM))
    if len(x) < MIN_WINDOWS:
        raise ValueError(f"only {len(x)} usable windows, need at least {MIN_WINDOWS}")
    a = np.hstack([x, np.ones((len(x), 1))])
    sv = np.linalg.svd(a, compute_uv=False)
    rank = int(np.sum(sv > RANK_RTOL * sv[0]))
    ridge = rank < a.shape[1]
    if ridge:
        log.info("behaviour design has rank %d < %d, using ridge", rank, a.shape[1])
        w = np.linalg.solve(a.T @ a + RIDGE * np.eye(a.shape[1]), a.T @ y)
    else:
        w = np.linalg.lstsq(a, y, rcond=None)[0]
    return WritingBehaviorModel(w[:-1], w[-1], ridge)
