"""Timestamped sensor streams and their CSV formats."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

MAG_COLUMNS = ("t_s", "mx_uT", "my_uT", "mz_uT")
ACCEL_COLUMNS = ("t_s", "ax", "ay", "az")
GYRO_COLUMNS = ("t_s", "gx", "gy", "gz")
TOUCH_COLUMNS = ("t_s", "x_mm", "y_mm")
POSE_COLUMNS = ("t_s", "x_mm", "y_mm", "qw", "qx", "qy", "qz")
TRACE_COLUMNS = ("t", "x_mm", "y_mm")
INTERVAL_COLUMNS = ("begin_s", "end_s")


@dataclass
class MagLog:
    t: np.ndarray
    values: np.ndarray  # (n, 3) uT

    def __len__(self):
        return len(self.t)

    def segment(self, begin: float, end: float) -> "MagLog":
        keep = (self.t >= begin) & (self.t <= end)
        return MagLog(self.t[keep], self.values[keep])

    def shifted(self, offset) -> "MagLog":
        return MagLog(self.t.copy(), self.values - np.asarray(offset, dtype=float))


@dataclass
class ImuLog:
    t: np.ndarray
    values: np.ndarray  # (n, 3)

    def __len__(self):
        return len(self.t)


@dataclass
class TouchLog:
    t: np.ndarray
    xy: np.ndarray  # (n, 2) mm

    def __len__(self):
        return len(self.t)


@dataclass
class PoseLog:
    t: np.ndarray
    xy: np.ndarray  # (n, 2) mm
    quats: np.ndarray  # (n, 4) (w, x, y, z)

    def __len__(self):
        return len(self.t)

    def segments(self, max_gap: float) -> list["PoseLog"]:
        """Split at gaps longer than ``max_gap`` seconds (pen-up periods)."""
        if len(self.t) == 0:
            return []
        breaks = np.nonzero(np.diff(self.t) > max_gap)[0] + 1
        bounds = np.concatenate([[0], breaks, [len(self.t)]])
        return [PoseLog(self.t[a:b], self.xy[a:b], self.quats[a:b])
                for a, b in zip(bounds[:-1], bounds[1:])]


@dataclass
class Trace:
    t: np.ndarray
    xy: np.ndarray  # (n, 2) mm

    def __len__(self):
        return len(self.t)


@dataclass
class Session:
    """Everything one simulated recording produces."""

    mag: MagLog
    touch: TouchLog
    accel: ImuLog
    gyro: ImuLog
    pose: PoseLog
    strokes: list = field(default_factory=list)  # true (begin, end) pairs


def _empty(n_cols):
    return np.zeros((0, n_cols))


def write_csv(path, columns, rows) -> None:
    rows = np.asarray(rows, dtype=float).reshape(-1, len(columns))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def read_csv(path, columns) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != tuple(columns):
            raise ValueError(f"{path}: expected header {','.join(columns)}")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        return _empty(len(columns))
    return np.asarray(rows, dtype=float)


def write_mag(path, log: MagLog):
    write_csv(path, MAG_COLUMNS, np.column_stack([log.t, log.values]))


def read_mag(path) -> MagLog:
    a = read_csv(path, MAG_COLUMNS)
    return MagLog(a[:, 0], a[:, 1:4])


def write_imu(path, log: ImuLog, kind: str):
    cols = ACCEL_COLUMNS if kind == "accel" else GYRO_COLUMNS
    write_csv(path, cols, np.column_stack([log.t, log.values]))


def read_imu(path, kind: str) -> ImuLog:
    a = read_csv(path, ACCEL_COLUMNS if kind == "accel" else GYRO_COLUMNS)
    return ImuLog(a[:, 0], a[:, 1:4])


def write_touch(path, log: TouchLog):
    write_csv(path, TOUCH_COLUMNS, np.column_stack([log.t, log.xy]))


def read_touch(path) -> TouchLog:
    a = read_csv(path, TOUCH_COLUMNS)
    return TouchLog(a[:, 0], a[:, 1:3])


def write_pose(path, log: PoseLog):
    write_csv(path, POSE_COLUMNS, np.column_stack([log.t, log.xy, log.quats]))


def read_pose(path) -> PoseLog:
    a = read_csv(path, POSE_COLUMNS)
    return PoseLog(a[:, 0], a[:, 1:3], a[:, 3:7])


def write_trace(path, trace: Trace):
    write_csv(path, TRACE_COLUMNS, np.column_stack([trace.t, trace.xy]))


def read_trace(path) -> Trace:
    a = read_csv(path, TRACE_COLUMNS)
    return Trace(a[:, 0], a[:, 1:3])


def write_intervals(path, intervals):
    rows = [(iv.begin, iv.end) if hasattr(iv, "begin") else tuple(iv) for iv in intervals]
    write_csv(path, INTERVAL_COLUMNS, rows)


def read_intervals(path) -> np.ndarray:
    return read_csv(path, INTERVAL_COLUMNS)


SESSION_FILES = {
    "mag": "mag.csv",
    "accel": "accel.csv",
    "gyro": "gyro.csv",
    "touch": "touch.csv",
    "pose": "pose.csv",
    "strokes": "strokes.csv",
}


def write_session(directory, session: Session) -> None:
    os.makedirs(directory, exist_ok=True)
    j = lambda name: os.path.join(directory, SESSION_FILES[name])  # noqa: E731
    write_mag(j("mag"), session.mag)
    write_imu(j("accel"), session.accel, "accel")
    write_imu(j("gyro"), session.gyro, "gyro")
    write_touch(j("touch"), session.touch)
    write_pose(j("pose"), session.pose)
    write_intervals(j("strokes"), session.strokes)


def read_session(directory) -> Session:
    j = lambda name: os.path.join(directory, SESSION_FILES[name])  # noqa: E731
    strokes = []
    if os.path.exists(j("strokes")):
        strokes = [tuple(r) for r in read_intervals(j("strokes"))]
    return Session(
        mag=read_mag(j("mag")),
        touch=read_touch(j("touch")) if os.path.exists(j("touch")) else TouchLog(np.zeros(0), _empty(2)),
        accel=read_imu(j("accel"), "accel"),
        gyro=read_imu(j("gyro"), "gyro"),
        pose=read_pose(j("pose")) if os.path.exists(j("pose")) else PoseLog(np.zeros(0), _empty(2), _empty(4)),
        strokes=strokes,
    )
