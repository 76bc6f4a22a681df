import math

import numpy as np
import pytest

from pencilmag import fieldmodel as fm
from pencilmag.geometry import AttitudeAngles, angles_to_matrix, roll_about, tip_from_mag_position, to_pencil_frame
from pencilmag.logs import MagLog, PoseLog, TouchLog
from pencilmag.magmap import (
    OutOfExtentError,
    ReconstructionConfig,
    VoxelField,
    WarDriveLog,
    align_streams,
    build_2d_map,
    build_pencil_map,
    default_lambda_grid,
    discrete_div_curl,
    energy,
    estimate_ambient,
    grid_search_lambda,
    query_2d,
    query_pencil_map,
    reconstruct,
)


def const_mag(n, value, rate=50.0):
    return MagLog(np.arange(n) / rate, np.tile(value, (n, 1)).astype(float))


def analytic_field(dims, cell, fn, origin=(0.0, 0.0, 0.0)):
    vf = VoxelField(np.asarray(origin, float), cell, np.zeros(dims + (3,)), np.ones(dims, dtype=np.int64))
    vf.mean[:] = fn(vf.centers())
    return vf


# -- ambient -----------------------------------------------------------------

def test_ambient_of_constant_stream():
    mag = const_mag(200, [20.0, -5.0, -40.0])
    amb = estimate_ambient(mag, (0.0, 2.0))
    assert np.allclose(amb, [20, -5, -40])
    assert np.allclose((mag.values - amb)[:100].mean(axis=0), 0.0, atol=1e-9)


def test_ambient_needs_samples():
    with pytest.raises(ValueError):
        estimate_ambient(const_mag(200, [1, 2, 3]), (10.0, 11.0))


def test_ambient_standard_error(rng):
    sigma, n = 0.5, 100
    errs = []
    for _ in range(100):
        mag = MagLog(np.arange(n) / 50.0, rng.normal(0.0, sigma, (n, 3)) + [20, -5, -40])
        errs.append(estimate_ambient(mag, (0.0, 10.0)) - [20, -5, -40])
    # per-component standard error sigma / sqrt(n); allow 20 % Monte Carlo slack
    assert np.std(errs) == pytest.approx(sigma / math.sqrt(n), rel=0.2)


# -- alignment ---------------------------------------------------------------

def test_align_on_mag_timeline():
    t_touch = np.arange(0, 240) / 120.0
    touch = TouchLog(t_touch, np.column_stack([t_touch * 10, t_touch * 5]))
    mag = const_mag(150, [1.0, 2.0, 3.0])
    log = align_streams(touch, None, mag)
    assert np.all(np.isin(log.t, mag.t))
    assert np.all(log.t <= t_touch[-1] + 1 / 120.0)
    # nearest touch at most half a touch period away
    err = np.abs(log.tip[:, 0] / 10.0 - log.t)
    assert err.max() <= 0.5 / 120.0 + 1e-12


def test_align_empty_mag():
    touch = TouchLog(np.arange(10) / 120.0, np.zeros((10, 2)))
    assert len(align_streams(touch, None, MagLog(np.zeros(0), np.zeros((0, 3))))) == 0


def test_align_uses_pose_orientation():
    t = np.arange(50) / 50.0
    q = np.tile([math.cos(0.3), 0.0, 0.0, math.sin(0.3)], (50, 1))
    pose = PoseLog(t, np.zeros((50, 2)), q)
    touch = TouchLog(np.arange(120) / 120.0, np.zeros((120, 2)))
    log = align_streams(touch, pose, const_mag(50, [1, 0, 0]))
    assert len(log) == 50
    # axes rows: x axis of a 0.6 rad turn about Z
    assert np.allclose(log.axes[0, 0], [math.cos(0.6), math.sin(0.6), 0.0])


# -- 2D map ------------------------------------------------------------------

def vertical_log(xy, field):
    n = len(xy)
    axes = np.broadcast_to(angles_to_matrix(90.0, 0.0, 0.0).T, (n, 3, 3)).copy()
    return WarDriveLog(np.arange(n) / 50.0, np.column_stack([xy, np.zeros(n)]), axes, np.asarray(field, float))


def test_2d_single_cell_mean(rng):
    xy = rng.uniform(11.0, 14.0, size=(20, 2))
    f = rng.normal(size=(20, 3))
    m = build_2d_map(vertical_log(xy, f))
    assert m.dims == (1, 1)
    assert np.allclose(m.mean[0, 0], f.mean(axis=0))
    assert np.allclose(query_2d(m, 12.5, 12.5), f.mean(axis=0))
    with pytest.raises(OutOfExtentError):
        query_2d(m, 40.0, 40.0)


def test_2d_map_matches_forward_model(screen, dipoles):
    sigma = 0.2
    script = fm.script_raster(screen, region=screen.input_cell(2))
    amb = fm.AmbientField()
    noisy = fm.simulate_session(script, dipoles, screen, amb, fm.SensorNoise(sigma_mag=sigma),
                                np.random.default_rng(7))
    clean = fm.simulate_session(script, dipoles, screen, amb, fm.SensorNoise(sigma_mag=0.0),
                                np.random.default_rng(7))
    log = align_streams(noisy.touch, None, noisy.mag, amb.constant)
    m = build_2d_map(log)
    exact = clean.mag.values[np.searchsorted(clean.mag.t, log.t)] - amb.constant
    ij = np.floor((log.tip[:, :2] - m.origin) / m.cell_size).astype(int)
    inside = []
    for key in {tuple(k) for k in ij}:
        sel = np.all(ij == key, axis=1)
        bound = 3 * sigma / math.sqrt(sel.sum())
        inside.extend(np.abs(m.mean[key] - exact[sel].mean(axis=0)) <= bound)
    # a 3-sigma band holds 99.73 % of Gaussian cell means
    assert len(inside) > 300
    assert np.mean(inside) >= 0.99


# -- 3D map ------------------------------------------------------------------

def test_single_row_voxel(screen):
    p = angles_to_matrix(60.0, 100.0, 0.0).T
    log = WarDriveLog(np.zeros(1), np.array([[80.0, 100.0, 0.0]]), p[None], np.array([[3.0, -1.0, 2.0]]))
    vf = build_pencil_map(log, screen.m_loc)
    assert vf.cell_size == 5.0
    assert vf.count.sum() == 1
    pos = to_pencil_frame(screen.m_loc, log.tip[0], p)
    idx = tuple(vf.cell_index(pos))
    assert vf.count[idx] == 1
    assert np.allclose(vf.mean[idx], p @ [3.0, -1.0, 2.0])


def ambiguous_pair(screen, rng):
    a = AttitudeAngles(rng.uniform(40, 80), rng.uniform(80, 150), rng.uniform(0, 360))
    p1 = angles_to_matrix(a.altitude, a.azimuth, a.roll).T
    t1 = np.array([rng.uniform(60, 140), rng.uniform(80, 140), 0.0])
    m_prime = to_pencil_frame(screen.m_loc, t1, p1)
    p2 = roll_about(p1, [0.0, 0.0, 1.0], rng.uniform(0.2, 1.0))
    t2 = tip_from_mag_position(screen.m_loc, p2, m_prime)
    return (t1, p1), (t2, p2)


def test_ambiguous_poses_share_a_voxel(screen, rng):
    (t1, p1), (t2, p2) = ambiguous_pair(screen, rng)
    log = WarDriveLog(np.zeros(2), np.array([t1, t2]), np.array([p1, p2]), np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    vf = build_pencil_map(log, screen.m_loc)
    assert np.count_nonzero(vf.count) == 1 and vf.count.max() == 2


def test_map_is_order_independent(screen, dipoles, rng):
    s = fm.simulate_session(fm.script_wardrive(screen, 10.0, rng), dipoles, screen,
                            fm.AmbientField(), fm.SensorNoise(), rng)
    log = align_streams(s.touch, s.pose, s.mag, fm.AmbientField().constant)
    perm = rng.permutation(len(log))
    a = build_pencil_map(log, screen.m_loc)
    b = build_pencil_map(log.take(perm), screen.m_loc)
    assert np.array_equal(a.count, b.count)
    assert np.array_equal(a.mean, b.mean)


def test_voxel_json_round_trip(tmp_path, rng):
    vf = VoxelField(np.array([-10.0, -5.0, 0.0]), 5.0, rng.normal(size=(3, 4, 2, 3)),
                    rng.integers(0, 3, size=(3, 4, 2)))
    vf.mean[~vf.valid] = 0.0
    vf.save(tmp_path / "m.json")
    back = VoxelField.load(tmp_path / "m.json")
    assert np.array_equal(back.mean, vf.mean) and np.array_equal(back.count, vf.count)
    assert np.array_equal(back.origin, vf.origin) and back.dims == vf.dims


# -- interpolation -----------------------------------------------------------

def test_query_at_centres_and_midpoints(rng):
    vf = VoxelField(np.zeros(3), 5.0, rng.normal(size=(3, 3, 3, 3)), np.ones((3, 3, 3), dtype=np.int64))
    c = vf.centers()
    assert np.allclose(query_pencil_map(vf, c[1, 2, 0]), vf.mean[1, 2, 0])
    mid = (c[0, 1, 1] + c[1, 1, 1]) / 2
    assert np.allclose(query_pencil_map(vf, mid), (vf.mean[0, 1, 1] + vf.mean[1, 1, 1]) / 2)
    with pytest.raises(OutOfExtentError):
        query_pencil_map(vf, [-1.0, 2.0, 2.0])


def test_query_is_continuous(exact_map, rng):
    pts = rng.uniform(-60, 60, size=(200, 3))
    grad = np.abs(np.diff(exact_map.mean, axis=0)).max() / exact_map.cell_size
    for p in pts:
        step = rng.normal(size=3)
        step *= 0.01 / np.linalg.norm(step)
        try:
            a, b = query_pencil_map(exact_map, p), query_pencil_map(exact_map, p + step)
        except OutOfExtentError:
            continue
        assert np.abs(a - b).max() <= 3 * grad * 0.01 + 1e-9


# -- operators ---------------------------------------------------------------

def test_div_curl_of_constant():
    vf = analytic_field((4, 5, 6), 5.0, lambda p: np.broadcast_to([1.0, -2.0, 3.0], p.shape))
    div, curl = discrete_div_curl(vf)
    assert np.allclose(div, 0.0) and np.allclose(curl, 0.0)


def test_div_of_position_field():
    vf = analytic_field((4, 5, 6), 5.0, lambda p: p.copy())
    div, curl = discrete_div_curl(vf)
    assert np.allclose(div, 3.0) and np.allclose(curl, 0.0)
    div_cells, _ = discrete_div_curl(vf, spacing=1.0)
    assert np.allclose(div_cells, 3.0 * 5.0)


def test_curl_of_rotation_field():
    vf = analytic_field((5, 5, 5), 2.0, lambda p: np.stack([-p[..., 1], p[..., 0], np.zeros(p.shape[:-1])], -1))
    div, curl = discrete_div_curl(vf)
    assert np.allclose(curl[1:-1, 1:-1, 1:-1], [0.0, 0.0, 2.0])
    assert np.allclose(div[1:-1, 1:-1, 1:-1], 0.0)


# -- reconstruction ----------------------------------------------------------

def dipole_box(dipoles, dims=(10, 10, 8), origin=(-25.0, -25.0, -95.0)):
    return fm.tabulate_pencil_map(dipoles, origin, dims)


def test_data_term_only_reproduces_input(rng):
    vf = VoxelField(np.zeros(3), 5.0, rng.normal(size=(4, 4, 4, 3)), np.ones((4, 4, 4), dtype=np.int64))
    res = reconstruct(vf, ReconstructionConfig(lambda_curl=0.0, lambda_div=0.0))
    assert np.allclose(res.field.mean, vf.mean, atol=1e-9)


def test_masked_dipole_field_is_filled(dipoles, rng):
    truth = dipole_box(dipoles)
    masked = VoxelField(truth.origin, truth.cell_size, truth.mean.copy(), truth.count.copy())
    hide = rng.random(truth.dims) < 0.3
    masked.count[hide] = 0
    masked.valid[hide] = False
    masked.mean[hide] = 0.0
    res = reconstruct(masked)
    assert res.field.valid.all()
    err = res.field.mean[hide] - truth.mean[hide]
    rel = np.linalg.norm(err) / np.linalg.norm(truth.mean[hide])
    assert rel <= 0.10
    assert all(b <= a + 1e-12 for a, b in zip(res.energies, res.energies[1:]))
    cfg = ReconstructionConfig()
    zero = np.where(masked.valid[..., None], masked.mean, 0.0)
    assert energy(masked, res.field.mean, cfg) <= energy(masked, zero, cfg)


def test_iteration_cap_reported(dipoles):
    res = reconstruct(dipole_box(dipoles), ReconstructionConfig(max_iters=2))
    assert not res.converged and res.iterations <= 2


def test_grid_search_single_and_best(dipoles, rng):
    vf = dipole_box(dipoles, dims=(6, 6, 5))
    vf.mean += rng.normal(0, 0.05 * np.sqrt(np.mean(vf.mean**2)), vf.mean.shape)
    mask = rng.random(vf.dims) < 0.2
    assert grid_search_lambda(vf, [(0.3, 3.0)], mask) == (0.3, 3.0)
    cands = [(0.0, 0.3), (0.1, 1.5)]
    best = grid_search_lambda(vf, cands, mask, max_iters=200)
    assert best in cands


def test_default_grid_keeps_div_weight_large():
    grid = default_lambda_grid()
    assert len(grid) == 16
    assert all(d >= c for c, d in grid)
