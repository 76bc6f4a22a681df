import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pencilmag.geometry import geodesic_angle, quat_to_matrix
from pencilmag.smoothing import KalmanParams, QuatTrack, kalman_smooth_quats


def rotating_track(rng, n=100, rate=0.5, dt=0.02):
    """Unit quaternions turning at ``rate`` rad/s about a random axis."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    start = rng.normal(size=4)
    start /= np.linalg.norm(start)
    half = 0.5 * rate * dt * np.arange(n)
    turn = np.column_stack([np.cos(half), np.sin(half)[:, None] * axis])
    w0, v0 = start[0], start[1:]
    w1, v1 = turn[:, 0], turn[:, 1:]
    q = np.column_stack([w1 * w0 - v1 @ v0, w1[:, None] * v0 + w0 * v1 + np.cross(v1, v0)])
    return np.arange(n) * dt, q


def noisy(q, sigma, rng):
    z = q + rng.normal(0.0, sigma, q.shape)
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def test_constant_track_is_fixed_point():
    q = np.tile([0.5, 0.5, 0.5, 0.5], (20, 1))
    out = kalman_smooth_quats(QuatTrack(np.arange(20) * 0.02, q))
    assert np.allclose(out.quats, q, atol=1e-9)


def test_needs_two_samples():
    with pytest.raises(ValueError):
        kalman_smooth_quats(QuatTrack([0.0], [[1.0, 0, 0, 0]]))


def test_timestamps_must_increase():
    with pytest.raises(ValueError):
        QuatTrack([0.0, 0.0], [[1.0, 0, 0, 0]] * 2)


def test_params_positive():
    with pytest.raises(ValueError):
        KalmanParams(process_var=0.0)


def test_smoothing_beats_raw_on_rotating_tracks(rng):
    raw_err, smooth_err = [], []
    for _ in range(100):
        t, clean = rotating_track(rng)
        z = noisy(clean, 0.05, rng)
        out = kalman_smooth_quats(QuatTrack(t, z))
        assert np.allclose(np.linalg.norm(out.quats, axis=1), 1.0, atol=1e-9)
        raw_err.append(geodesic_angle(z, clean).mean())
        smooth_err.append(geodesic_angle(out.quats, clean).mean())
    assert np.mean(smooth_err) < np.mean(raw_err)
    assert np.all(np.array(smooth_err) < np.array(raw_err))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 29), max_size=10), st.integers(0, 2**32 - 1))
def test_sign_flips_do_not_change_rotations(flips, seed):
    rng = np.random.default_rng(seed)
    t, clean = rotating_track(rng, n=30)
    z = noisy(clean, 0.05, rng)
    flipped = z.copy()
    flipped[flips] *= -1.0
    a = kalman_smooth_quats(QuatTrack(t, z)).quats
    b = kalman_smooth_quats(QuatTrack(t, flipped)).quats
    assert np.allclose(quat_to_matrix(a), quat_to_matrix(b), atol=1e-9)


def test_smoothed_variance_not_larger(rng):
    base = np.array([0.8, 0.2, -0.4, 0.4])
    base /= np.linalg.norm(base)
    z = noisy(np.tile(base, (200, 1)), 0.02, rng)
    out = kalman_smooth_quats(QuatTrack(np.arange(200) * 0.02, z)).quats
    assert np.all(out.var(axis=0) <= z.var(axis=0))
