import numpy as np
import pytest

from pencilmag.logs import PoseLog
from pencilmag.tracker import WritingBehaviorModel, fit_behavior_model
from pencilmag.tracker.behavior import FEATURE_DIM, STATE_DIM


def pose_from_states(segments, gap=1.0):
    """Concatenate state sequences into one pose log with pen-up gaps."""
    t, s, t0 = [], [], 0.0
    for seg in segments:
        t.append(t0 + np.arange(len(seg)) * 0.02)
        s.append(seg)
        t0 = t[-1][-1] + gap
    s = np.vstack(s)
    return PoseLog(np.concatenate(t), s[:, :2], s[:, 2:])


def test_dimensions():
    m = WritingBehaviorModel.zero()
    assert m.coef.shape == (FEATURE_DIM, STATE_DIM) == (18, 6)
    assert np.allclose(m.predict(np.ones(18)), 0.0)


def test_known_linear_map_recovered(rng):
    a = rng.normal(0.0, 0.3, (18, 6))
    c = rng.normal(0.0, 0.01, 6)
    segs = []
    for _ in range(300):
        d = rng.normal(0.0, 0.01, (3, 6))
        nxt = d.reshape(-1) @ a + c
        deltas = np.vstack([d, nxt])
        start = np.array([50.0, 50.0, 1.0, 0.0, 0.0, 0.0])
        segs.append(np.vstack([start, start + np.cumsum(deltas, axis=0)]))
    model = fit_behavior_model(pose_from_states(segs), max_gap=0.03)
    assert not model.ridge
    assert np.allclose(model.coef, a, atol=1e-6)
    assert np.allclose(model.intercept, c, atol=1e-6)


def test_constant_delta_is_a_fixed_point():
    delta = np.array([0.8, -0.3, 0.0, 0.001, 0.0, -0.001])
    start = np.array([20.0, 80.0, 0.9, 0.1, 0.3, 0.2])
    states = start + np.arange(150)[:, None] * delta
    model = fit_behavior_model(pose_from_states([states]))
    assert model.ridge  # constant features: rank-deficient design
    assert np.allclose(model.predict(np.tile(delta, 3)), delta, atol=1e-6)


def test_too_few_windows():
    states = np.tile([1.0, 1.0, 1.0, 0, 0, 0], (20, 1)) + np.arange(20)[:, None] * 0.1
    with pytest.raises(ValueError):
        fit_behavior_model(pose_from_states([states]))


def test_save_load(tmp_path, rng):
    m = WritingBehaviorModel(rng.normal(size=(18, 6)), rng.normal(size=6), True)
    m.save(tmp_path / "b.json")
    back = WritingBehaviorModel.load(tmp_path / "b.json")
    assert np.array_equal(back.coef, m.coef) and np.array_equal(back.intercept, m.intercept) and back.ridge


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        WritingBehaviorModel(np.full((18, 6), np.nan), np.zeros(6))
