import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pencilmag import fieldmodel as fm
from pencilmag import logs

finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(arrays(float, st.tuples(st.integers(0, 20), st.just(4)), elements=finite))
def test_mag_round_trip_is_exact(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("m") / "mag.csv"
    logs.write_mag(path, logs.MagLog(a[:, 0], a[:, 1:]))
    back = logs.read_mag(path)
    assert np.array_equal(back.t, a[:, 0]) and np.array_equal(back.values, a[:, 1:])


def test_header_is_checked(tmp_path):
    path = tmp_path / "x.csv"
    logs.write_trace(path, logs.Trace(np.array([0.0]), np.zeros((1, 2))))
    with pytest.raises(ValueError):
        logs.read_mag(path)
    assert path.read_text().splitlines()[0] == ",".join(logs.TRACE_COLUMNS)


def test_intervals_accept_objects_and_pairs(tmp_path):
    from pencilmag.strokedetect import StrokeInterval
    logs.write_intervals(tmp_path / "a.csv", [StrokeInterval(1.0, 2.0), (3.0, 4.5)])
    assert np.array_equal(logs.read_intervals(tmp_path / "a.csv"), [[1.0, 2.0], [3.0, 4.5]])
    logs.write_intervals(tmp_path / "b.csv", [])
    assert logs.read_intervals(tmp_path / "b.csv").shape == (0, 2)


def test_session_round_trip(tmp_path, screen, dipoles):
    sc = fm.script_glyph("7", screen, size=12.0)
    s = fm.simulate_session(sc, dipoles, screen, fm.AmbientField(), fm.SensorNoise(), np.random.default_rng(3))
    logs.write_session(tmp_path / "s", s)
    back = logs.read_session(tmp_path / "s")
    for name in ("mag", "accel", "gyro"):
        assert np.array_equal(getattr(back, name).values, getattr(s, name).values)
    assert np.array_equal(back.pose.quats, s.pose.quats)
    assert np.array_equal(back.touch.xy, s.touch.xy)
    assert back.strokes == [tuple(map(float, iv)) for iv in s.strokes]


def test_session_without_optional_files(tmp_path, screen, dipoles):
    sc = fm.script_glyph("l", screen, size=10.0)
    s = fm.simulate_session(sc, dipoles, screen, fm.AmbientField(), fm.SensorNoise(), np.random.default_rng(0))
    logs.write_session(tmp_path, s)
    for name in ("pose", "touch", "strokes"):
        (tmp_path / logs.SESSION_FILES[name]).unlink()
    back = logs.read_session(tmp_path)
    assert len(back.pose) == 0 and len(back.touch) == 0 and back.strokes == []


def test_pose_segments_split_on_gaps():
    t = np.array([0.0, 0.01, 0.02, 1.0, 1.01])
    p = logs.PoseLog(t, np.zeros((5, 2)), np.tile([1.0, 0, 0, 0], (5, 1)))
    assert [len(s) for s in p.segments(0.03)] == [3, 2]
    assert logs.PoseLog(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 4))).segments(0.03) == []
