import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from pencilmag import fieldmodel as fm
from pencilmag.logs import ImuLog, MagLog
from pencilmag.strokedetect import (
    ImuPeakConfig,
    StrokeInterval,
    StrokeWindowConfig,
    detect_strokes,
    refine_strokes,
    rough_strokes,
    window_variance,
)


def burst_log(n=600, lo=200, hi=400, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.normal(0.0, 0.1, (n, 3))
    v[lo:hi] += rng.normal(0.0, 5.0, (hi - lo, 3))
    return MagLog(np.arange(n) / 50.0, v)


def flat_imu(n=1000, rate=100.0):
    t = np.arange(n) / rate
    acc = np.tile([0.0, 0.0, fm.GRAVITY], (n, 1)) + np.random.default_rng(1).normal(0, 0.005, (n, 3))
    gyr = np.random.default_rng(2).normal(0, 0.002, (n, 3))
    return ImuLog(t, acc), ImuLog(t.copy(), gyr)


def test_defaults():
    cfg = StrokeWindowConfig()
    assert (cfg.window, cfg.variance_threshold) == (100, 0.12)
    assert ImuPeakConfig().search_margin == 25
    with pytest.raises(ValueError):
        StrokeWindowConfig(window=1)
    with pytest.raises(ValueError):
        StrokeInterval(2.0, 1.0)


def test_constant_stream_has_no_strokes():
    mag = MagLog(np.arange(500) / 50.0, np.tile([20.0, -5.0, -40.0], (500, 1)))
    assert rough_strokes(mag) == []


def test_short_log_gives_nothing():
    assert rough_strokes(MagLog(np.arange(50) / 50.0, np.zeros((50, 3)))) == []


def test_burst_matches_direct_oracle():
    mag = burst_log()
    w = 100
    # direct oracle: loop over window starts
    var = np.array([mag.values[i:i + w].var(axis=0).sum() for i in range(len(mag) - w + 1)])
    above = np.nonzero(var > 0.12)[0]
    oracle_begin = mag.t[above[0] + w // 2]
    oracle_end = mag.t[above[-1] + 1 + w // 2]
    (iv,) = rough_strokes(mag)
    assert iv.begin == pytest.approx(oracle_begin) and iv.end == pytest.approx(oracle_end)
    assert abs(iv.begin * 50 - 200) <= w / 2 and abs(iv.end * 50 - 400) <= w / 2


def test_rough_uses_summed_axis_variance():
    mag = burst_log()
    direct = sliding_window_view(mag.values, 100, axis=0).var(axis=-1).sum(axis=-1)
    assert np.allclose(window_variance(mag.values, 100), direct)


def test_no_peaks_keeps_rough():
    acc, gyr = flat_imu()
    rough = [StrokeInterval(2.0, 4.0), StrokeInterval(6.0, 7.5)]
    assert refine_strokes(rough, acc, gyr) == rough


def test_peaks_snap_boundaries():
    acc, gyr = flat_imu()
    acc.values[250:253, 2] += [0.35, 0.5, 0.35]
    acc.values[380:383, 2] += [0.35, 0.5, 0.35]
    (iv,) = refine_strokes([StrokeInterval(2.0, 4.0)], acc, gyr)
    assert iv.begin == pytest.approx(2.5) and iv.end == pytest.approx(3.82)


def test_peak_outside_margin_ignored():
    acc, gyr = flat_imu()
    acc.values[700:703, 2] += 0.5  # 3 s past the interval, margin is 0.25 s
    rough = [StrokeInterval(2.0, 4.0)]
    assert refine_strokes(rough, acc, gyr) == rough


def test_translation_equivariance(screen, dipoles):
    script = fm.script_glyph("l", screen)
    a = fm.simulate_session(script, dipoles, screen, fm.AmbientField(), fm.SensorNoise(), np.random.default_rng(3))
    shift = 7.0
    mag = MagLog(a.mag.t + shift, a.mag.values)
    acc = ImuLog(a.accel.t + shift, a.accel.values)
    gyr = ImuLog(a.gyro.t + shift, a.gyro.values)
    base = detect_strokes(a.mag, a.accel, a.gyro)
    moved = detect_strokes(mag, acc, gyr)
    assert len(base) == len(moved) == 1
    assert moved[0].begin == pytest.approx(base[0].begin + shift)
    assert moved[0].end == pytest.approx(base[0].end + shift)


def test_refined_inside_rough_with_margin(screen, dipoles):
    scripts = [fm.script_glyph(g, screen, cell=c) for g, c in (("l", 1), ("1", 2), ("7", 3))]
    script = fm.concatenate_scripts([fm.TrajectoryScript(s.strokes[:1]) for s in scripts], gap=3.0)
    s = fm.simulate_session(script, dipoles, screen, fm.AmbientField(), fm.SensorNoise(), np.random.default_rng(4))
    rough = rough_strokes(s.mag)
    refined = refine_strokes(rough, s.accel, s.gyro)
    assert len(refined) == len(rough) == 3
    margin = 25 / 100.0
    for r, f in zip(rough, refined):
        assert r.begin - margin - 1e-9 <= f.begin < f.end <= r.end + margin + 1e-9
    assert all(a.end < b.begin for a, b in zip(refined, refined[1:]))
    for (b, e), f in zip(s.strokes, refined):
        assert abs(f.begin - b) <= 0.03 + 1e-9 and abs(f.end - e) <= 0.03 + 1e-9
