"""Synthetic ground truth: a dipole pencil, scripted handwriting, simulated sensors.

The pencil field is a sum of point dipoles fixed in the pencil frame. Pen-up
means the pencil is away from the device, so it contributes no field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    AZIMUTH_RANGE,
    ALTITUDE_RANGE,
    AttitudeAngles,
    ScreenConfig,
    angles_to_matrix,
    matrix_to_quat,
)
from .logs import ImuLog, MagLog, PoseLog, Session, TouchLog

MAG_RATE = 50.0
IMU_RATE = 100.0
TOUCH_RATE = 120.0
GRAVITY = 9.80665

# mu0 / 4pi in uT * mm^3 / (A m^2)
_DIPOLE_CONST = 1e-7 * 1e6 * 1e9
_MIN_DISTANCE = 1.0

# gyro spike amplitude (rad/s) per unit of touch spike amplitude (m/s^2)
_GYRO_SPIKE_RATIO = 0.2
_SPIKE_SHAPE = np.sin(np.pi * np.arange(1, 4) / 4.0)


class SingularFieldError(ValueError):
    """Field requested within 1 mm of a dipole."""


class UnknownGlyphError(KeyError):
    pass


@dataclass(frozen=True)
class DipoleSet:
    """Point dipoles on the pencil axis.

    ``offsets`` are distances (mm) from the tip along the pencil's +Z;
    ``moments`` are pencil-frame dipole moments in A m^2.
    """

    offsets: tuple = (40.0, 80.0)
    moments: tuple = ((0.0, 0.0, 0.1), (0.0, 0.0, -0.05))

    def __post_init__(self):
        if len(self.offsets) == 0 or len(self.offsets) != len(self.moments):
            raise ValueError("need at least one dipole with one moment each")
        if not np.all(np.isfinite(np.asarray(self.moments, dtype=float))):
            raise ValueError("dipole moments must be finite")

    @property
    def positions(self) -> np.ndarray:
        pos = np.zeros((len(self.offsets), 3))
        pos[:, 2] = self.offsets
        return pos


@dataclass(frozen=True)
class AmbientField:
    constant: tuple = (20.0, -5.0, -40.0)
    drift: tuple = (0.0, 0.0, 0.0)  # uT / s

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)[..., None]
        return np.asarray(self.constant) + t * np.asarray(self.drift)


@dataclass(frozen=True)
class SensorNoise:
    sigma_mag: float = 0.1  # uT
    sigma_acc: float = 0.005  # m/s^2
    sigma_gyro: float = 0.002  # rad/s
    touch_spike_amplitude: float = 0.5  # m/s^2

    def __post_init__(self):
        if min(self.sigma_mag, self.sigma_acc, self.sigma_gyro, self.touch_spike_amplitude) < 0:
            raise ValueError("noise parameters must be >= 0")


@dataclass
class Stroke:
    """Pen-down polyline: ``xy`` (n, 2) mm, ``t`` (n,) s, ``angles`` (n, 3) deg."""

    xy: np.ndarray
    t: np.ndarray
    angles: np.ndarray

    @property
    def begin(self) -> float:
        return float(self.t[0])

    @property
    def end(self) -> float:
        return float(self.t[-1])

    def pose_at(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Interpolated tip (n, 2) and attitude angles (n, 3) at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        xy = np.column_stack([np.interp(t, self.t, self.xy[:, k]) for k in range(2)])
        ang = np.column_stack([np.interp(t, self.t, self.angles[:, k]) for k in range(3)])
        return xy, ang


@dataclass
class TrajectoryScript:
    strokes: list
    lead_in: float = 3.0
    lead_out: float = 3.0

    def __post_init__(self):
        last = -np.inf
        for s in self.strokes:
            if len(s.t) < 2 or np.any(np.diff(s.t) <= 0) or s.t[0] <= last:
                raise ValueError("stroke timestamps must be strictly increasing")
            last = s.t[-1]

    @property
    def duration(self) -> float:
        if not self.strokes:
            return self.lead_in + self.lead_out
        return self.strokes[-1].end + self.lead_out

    def check_bounds(self, screen: ScreenConfig) -> bool:
        return all(np.all(screen.contains(s.xy[:, 0], s.xy[:, 1])) for s in self.strokes)

    def shifted(self, dt: float) -> "TrajectoryScript":
        return TrajectoryScript(
            [Stroke(s.xy.copy(), s.t + dt, s.angles.copy()) for s in self.strokes],
            self.lead_in + dt, self.lead_out)


# ---------------------------------------------------------------------------
# forward model


def dipole_field(dipoles: DipoleSet, points) -> np.ndarray:
    """Vectorised dipole field (uT) at pencil-frame points (..., 3) mm."""
    p = np.asarray(points, dtype=float)
    out = np.zeros(p.shape)
    for pos, moment in zip(dipoles.positions, np.asarray(dipoles.moments, dtype=float)):
        r = p - pos
        dist = np.linalg.norm(r, axis=-1, keepdims=True)
        if np.any(dist <= _MIN_DISTANCE):
            raise SingularFieldError("point within 1 mm of a dipole")
        rhat = r / dist
        mdotr = np.sum(rhat * moment, axis=-1, keepdims=True)
        out += _DIPOLE_CONST * (3.0 * mdotr * rhat - moment) / dist**3
    return out


def dipole_field_at(dipoles: DipoleSet, p) -> np.ndarray:
    """Field (uT) of the dipole set at one pencil-frame point (mm)."""
    return dipole_field(dipoles, np.asarray(p, dtype=float).reshape(3))


def screen_field(dipoles: DipoleSet, screen: ScreenConfig, xy, rot) -> np.ndarray:
    """Screen-frame field at the magnetometer for tips ``xy`` (n, 2) and
    rotation matrices ``rot`` (n, 3, 3) with pencil axes as columns."""
    xy = np.atleast_2d(xy)
    offset = screen.m_loc - np.column_stack([xy, np.zeros(len(xy))])
    m_prime_loc = np.einsum("nji,nj->ni", rot, offset)
    m_prime = dipole_field(dipoles, m_prime_loc)
    return np.einsum("nij,nj->ni", rot, m_prime)


def tabulate_pencil_map(dipoles: DipoleSet, origin, dims, cell: float = 5.0):
    """Voxel map holding the exact field at every cell center.

    This is the limit of an exhaustive, noiseless map-building session.
    Cells whose center is within 1 mm of a dipole are left empty.
    """
    from .magmap import VoxelField

    dims = tuple(int(d) for d in dims)
    origin = np.asarray(origin, dtype=float)
    axes = [origin[k] + (np.arange(dims[k]) + 0.5) * cell for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1)
    mean = np.zeros(dims + (3,))
    ok = np.ones(dims, dtype=bool)
    for pos in dipoles.positions:
        ok &= np.linalg.norm(pts - pos, axis=-1) > _MIN_DISTANCE
    mean[ok] = dipole_field(dipoles, pts[ok])
    counts = ok.astype(np.int64)
    return VoxelField(origin=origin, cell_size=float(cell), mean=mean, count=counts, valid=ok)


def pencil_map_extent(screen: ScreenConfig, cell: float = 5.0, margin: float = 10.0):
    """Origin and dims of a voxel box covering every ``M'_loc`` a tip on
    this screen can produce."""
    corners = np.array([[0, 0], [screen.width, 0], [0, screen.height], [screen.width, screen.height]])
    reach = np.max(np.linalg.norm(screen.m_loc[:2] - corners, axis=1))
    reach = float(np.hypot(reach, screen.m_loc[2])) + margin
    n = int(np.ceil(2 * reach / cell))
    origin = np.full(3, -n * cell / 2.0)
    return origin, (n, n, n)


# ---------------------------------------------------------------------------
# sensor simulation


def _sample_times(duration: float, rate: float) -> np.ndarray:
    return np.arange(int(round(duration * rate))) / rate


def _pose_samples(script: TrajectoryScript, t: np.ndarray):
    """Indices of ``t`` that are pen-down, with tips and attitude angles."""
    idx, xy, ang = [], [], []
    for s in script.strokes:
        sel = np.nonzero((t >= s.begin) & (t <= s.end))[0]
        if sel.size:
            p, a = s.pose_at(t[sel])
            idx.append(sel)
            xy.append(p)
            ang.append(a)
    if not idx:
        return np.zeros(0, dtype=int), np.zeros((0, 2)), np.zeros((0, 3))
    return np.concatenate(idx), np.vstack(xy), np.vstack(ang)


def simulate_session(
    script: TrajectoryScript,
    dipoles: DipoleSet,
    screen: ScreenConfig,
    ambient: AmbientField,
    noise: SensorNoise,
    rng: np.random.Generator,
) -> Session:
    """Magnetometer (50 Hz), touch (120 Hz), IMU (100 Hz) and pose logs.

    The pose log carries ground truth at the magnetometer timestamps while the
    pen is down. Each pen-down and pen-up puts a 3-sample half-sine pulse on
    both IMU streams, starting at the first IMU sample at or after the event.
    """
    duration = script.duration
    t_mag = _sample_times(duration, MAG_RATE)
    mag = ambient.at(t_mag)
    idx, xy, ang = _pose_samples(script, t_mag)
    quats = np.zeros((0, 4))
    if idx.size:
        rot = angles_to_matrix(ang[:, 0], ang[:, 1], ang[:, 2])
        mag[idx] += screen_field(dipoles, screen, xy, rot)
        quats = matrix_to_quat(rot)
    mag = mag + rng.normal(0.0, noise.sigma_mag, mag.shape) if noise.sigma_mag > 0 else mag
    pose = PoseLog(t_mag[idx], xy, quats)

    t_touch = _sample_times(duration, TOUCH_RATE)
    tidx, txy, _ = _pose_samples(script, t_touch)
    touch = TouchLog(t_touch[tidx], txy)

    t_imu = _sample_times(duration, IMU_RATE)
    accel = np.tile([0.0, 0.0, GRAVITY], (len(t_imu), 1))
    gyro = np.zeros((len(t_imu), 3))
    if noise.sigma_acc > 0:
        accel += rng.normal(0.0, noise.sigma_acc, accel.shape)
    if noise.sigma_gyro > 0:
        gyro += rng.normal(0.0, noise.sigma_gyro, gyro.shape)
    amp = noise.touch_spike_amplitude
    for s in script.strokes:
        for event in (s.begin, s.end):
            k = int(np.ceil(event * IMU_RATE - 1e-9))
            seg = slice(k, min(k + len(_SPIKE_SHAPE), len(t_imu)))
            n = seg.stop - seg.start
            if n <= 0:
                continue
            accel[seg, 2] += amp * _SPIKE_SHAPE[:n]
            gyro[seg, 0] += amp * _GYRO_SPIKE_RATIO * _SPIKE_SHAPE[:n]

    strokes = [(s.begin, s.end) for s in script.strokes]
    return Session(
        mag=MagLog(t_mag, mag),
        touch=touch,
        accel=ImuLog(t_imu, accel),
        gyro=ImuLog(t_imu.copy(), gyro),
        pose=pose,
        strokes=strokes,
    )


# ---------------------------------------------------------------------------
# scripted handwriting

_CIRCLE = [(0.5 + 0.5 * np.cos(a), 0.5 + 0.5 * np.sin(a))
           for a in np.linspace(-np.pi / 2, 1.5 * np.pi, 17)]
_STAR = [(0.5 + 0.5 * np.cos(a), 0.5 + 0.5 * np.sin(a))
         for a in (-np.pi / 2 + k * 4 * np.pi / 5 for k in range(6))]

# glyph box coordinates: x right, y down, unit square
GLYPHS: dict[str, list[list[tuple[float, float]]]] = {
    "a": [[(0.8, 0.4), (0.3, 0.4), (0.2, 0.7), (0.4, 1.0), (0.8, 0.85)], [(0.8, 0.35), (0.8, 1.0)]],
    "b": [[(0.2, 0.0), (0.2, 1.0), (0.7, 1.0), (0.8, 0.7), (0.7, 0.45), (0.2, 0.45)]],
    "c": [[(0.8, 0.45), (0.4, 0.4), (0.2, 0.7), (0.4, 1.0), (0.8, 0.95)]],
    "d": [[(0.8, 0.45), (0.3, 0.45), (0.2, 0.7), (0.3, 1.0), (0.8, 1.0)], [(0.8, 0.0), (0.8, 1.0)]],
    "e": [[(0.2, 0.7), (0.8, 0.7), (0.6, 0.4), (0.3, 0.45), (0.2, 0.8), (0.4, 1.0), (0.8, 0.95)]],
    "f": [[(0.7, 0.05), (0.45, 0.0), (0.4, 0.2), (0.4, 1.0)], [(0.2, 0.4), (0.7, 0.4)]],
    "g": [[(0.8, 0.4), (0.3, 0.4), (0.25, 0.65), (0.8, 0.7)], [(0.8, 0.35), (0.8, 1.0), (0.3, 0.95)]],
    "h": [[(0.2, 0.0), (0.2, 1.0)], [(0.2, 0.55), (0.5, 0.4), (0.8, 0.55), (0.8, 1.0)]],
    "i": [[(0.5, 0.4), (0.5, 1.0)], [(0.5, 0.15), (0.5, 0.2)]],
    "j": [[(0.6, 0.4), (0.6, 0.9), (0.4, 1.0), (0.25, 0.9)], [(0.6, 0.15), (0.6, 0.2)]],
    "k": [[(0.2, 0.0), (0.2, 1.0)], [(0.75, 0.4), (0.2, 0.7), (0.8, 1.0)]],
    "l": [[(0.5, 0.0), (0.5, 1.0)]],
    "m": [[(0.1, 1.0), (0.1, 0.4), (0.3, 0.35), (0.5, 0.5), (0.5, 1.0)],
          [(0.5, 0.5), (0.7, 0.35), (0.9, 0.5), (0.9, 1.0)]],
    "n": [[(0.2, 1.0), (0.2, 0.4), (0.6, 0.35), (0.8, 0.55), (0.8, 1.0)]],
    "o": [[(x, 0.4 + 0.6 * y) for x, y in _CIRCLE]],
    "p": [[(0.2, 0.4), (0.2, 1.0)], [(0.2, 0.45), (0.7, 0.4), (0.8, 0.55), (0.7, 0.7), (0.2, 0.7)]],
    "q": [[(0.8, 0.45), (0.3, 0.4), (0.2, 0.55), (0.3, 0.7), (0.8, 0.7)], [(0.8, 0.4), (0.8, 1.0)]],
    "r": [[(0.3, 1.0), (0.3, 0.4)], [(0.3, 0.55), (0.5, 0.4), (0.8, 0.45)]],
    "s": [[(0.8, 0.45), (0.5, 0.4), (0.25, 0.5), (0.5, 0.7), (0.75, 0.85), (0.5, 1.0), (0.2, 0.95)]],
    "t": [[(0.45, 0.1), (0.45, 0.9), (0.6, 1.0), (0.75, 0.95)], [(0.2, 0.4), (0.75, 0.4)]],
    "u": [[(0.2, 0.4), (0.2, 0.85), (0.4, 1.0), (0.8, 0.9)], [(0.8, 0.4), (0.8, 1.0)]],
    "v": [[(0.2, 0.4), (0.5, 1.0), (0.8, 0.4)]],
    "w": [[(0.1, 0.4), (0.3, 1.0), (0.5, 0.6), (0.7, 1.0), (0.9, 0.4)]],
    "x": [[(0.2, 0.4), (0.8, 1.0)], [(0.8, 0.4), (0.2, 1.0)]],
    "y": [[(0.2, 0.4), (0.5, 0.8)], [(0.8, 0.4), (0.3, 1.0)]],
    "z": [[(0.2, 0.4), (0.8, 0.4), (0.2, 1.0), (0.8, 1.0)]],
    "0": [[(x, y) for x, y in _CIRCLE]],
    "1": [[(0.3, 0.2), (0.55, 0.0), (0.55, 1.0)]],
    "2": [[(0.2, 0.2), (0.5, 0.0), (0.8, 0.2), (0.75, 0.45), (0.2, 1.0), (0.85, 1.0)]],
    "3": [[(0.2, 0.1), (0.7, 0.0), (0.8, 0.25), (0.45, 0.5), (0.8, 0.7), (0.7, 1.0), (0.2, 0.9)]],
    "4": [[(0.65, 1.0), (0.65, 0.0), (0.15, 0.7), (0.85, 0.7)]],
    "5": [[(0.8, 0.0), (0.25, 0.0), (0.2, 0.45), (0.65, 0.45), (0.8, 0.7), (0.65, 1.0), (0.2, 0.95)]],
    "6": [[(0.75, 0.05), (0.4, 0.1), (0.2, 0.6), (0.35, 1.0), (0.75, 0.9), (0.7, 0.55), (0.2, 0.6)]],
    "7": [[(0.15, 0.0), (0.85, 0.0), (0.4, 1.0)]],
    "8": [[(0.5, 0.5), (0.2, 0.25), (0.5, 0.0), (0.8, 0.25), (0.5, 0.5),
           (0.15, 0.75), (0.5, 1.0), (0.85, 0.75), (0.5, 0.5)]],
    "9": [[(0.8, 0.4), (0.5, 0.5), (0.2, 0.3), (0.5, 0.0), (0.8, 0.2), (0.8, 0.4), (0.75, 1.0)]],
    "square": [[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.0)]],
    "triangle": [[(0.5, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 0.0)]],
    "circle": [list(_CIRCLE)],
    "heart": [[(0.5, 0.3), (0.3, 0.0), (0.05, 0.1), (0.0, 0.35), (0.5, 1.0),
               (1.0, 0.35), (0.95, 0.1), (0.7, 0.0), (0.5, 0.3)]],
    "star": [list(_STAR)],
}


def script_glyph(
    glyph: str,
    screen: ScreenConfig,
    cell: int = 2,
    size: float = 40.0,
    speed: float = 40.0,
    attitude: AttitudeAngles | None = None,
    attitude_end: AttitudeAngles | None = None,
    start_time: float = 3.0,
    pen_up_gap: float = 0.6,
    lead_out: float = 3.0,
    center=None,
) -> TrajectoryScript:
    """Timed polyline strokes for a glyph drawn inside a writing cell.

    The glyph box (``size`` mm square) is centred in input cell ``cell``
    unless ``center`` is given. Attitude angles are interpolated linearly in
    arc length from ``attitude`` to ``attitude_end`` across the whole glyph.
    """
    key = glyph.lower() if len(glyph) == 1 else glyph
    if key not in GLYPHS:
        raise UnknownGlyphError(glyph)
    if attitude is None:
        attitude = AttitudeAngles(60.0, 110.0, 0.0)
    if attitude_end is None:
        attitude_end = attitude
    if center is None:
        x0, y0, x1, y1 = screen.input_cell(cell)
        center = ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
        size = min(size, x1 - x0, y1 - y0)
    polylines = [np.asarray(p, dtype=float) for p in GLYPHS[key]]
    pts = [(p - 0.5) * size + np.asarray(center, dtype=float) for p in polylines]

    lengths = [np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))]) for p in pts]
    total = sum(float(s[-1]) for s in lengths)
    a0 = np.array([attitude.altitude, attitude.azimuth, attitude.roll])
    a1 = np.array([attitude_end.altitude, attitude_end.azimuth, attitude_end.roll])
    # roll wraps; take the short way round
    a1[2] = a0[2] + ((a1[2] - a0[2] + 180.0) % 360.0 - 180.0)

    strokes, t, done = [], float(start_time), 0.0
    for p, s in zip(pts, lengths):
        if s[-1] <= 0:
            s = np.linspace(0.0, 1e-3, len(p))
        times = t + s / speed
        frac = (done + s) / max(total, 1e-12)
        angles = a0 + frac[:, None] * (a1 - a0)
        strokes.append(Stroke(p, times, angles))
        done += float(s[-1])
        t = float(times[-1]) + pen_up_gap
    return TrajectoryScript(strokes, lead_in=float(start_time), lead_out=lead_out)


def script_wardrive(
    screen: ScreenConfig,
    duration: float,
    rng: np.random.Generator,
    speed: float = 60.0,
    region=None,
    lead_in: float = 3.0,
) -> TrajectoryScript:
    """One long pen-down random scribble with random attitudes.

    Waypoints are drawn uniformly in ``region`` (default: whole screen) and
    attitudes uniformly in the handwriting ranges, roll in [0, 360).
    """
    x0, y0, x1, y1 = region if region is not None else (0.0, 0.0, screen.width, screen.height)
    pts = [rng.uniform([x0, y0], [x1, y1])]
    ang = [_random_attitude(rng)]
    length = 0.0
    while length < duration * speed:
        step = rng.uniform([x0, y0], [x1, y1])
        step = pts[-1] + np.clip(step - pts[-1], -25.0, 25.0)
        length += float(np.linalg.norm(step - pts[-1])) + 1e-6
        pts.append(step)
        a = _random_attitude(rng)
        a[2] = ang[-1][2] + ((a[2] - ang[-1][2] + 180.0) % 360.0 - 180.0) * 0.5
        ang.append(a)
    pts = np.asarray(pts)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1) + 1e-6)])
    return TrajectoryScript([Stroke(pts, lead_in + s / speed, np.asarray(ang))], lead_in=lead_in)


def _random_attitude(rng) -> np.ndarray:
    return np.array([
        rng.uniform(*ALTITUDE_RANGE),
        rng.uniform(*AZIMUTH_RANGE),
        rng.uniform(0.0, 360.0),
    ])


def script_raster(
    screen: ScreenConfig,
    spacing: float = 5.0,
    speed: float = 100.0,
    region=None,
    attitude: AttitudeAngles | None = None,
    lead_in: float = 3.0,
) -> TrajectoryScript:
    """Boustrophedon sweep over ``region`` at a fixed attitude (vertical by default)."""
    x0, y0, x1, y1 = region if region is not None else (0.0, 0.0, screen.width, screen.height)
    if attitude is None:
        attitude = AttitudeAngles(90.0, 0.0, 0.0)
    rows = np.arange(y0 + spacing / 2.0, y1, spacing)
    pts = []
    for i, y in enumerate(rows):
        xs = (x0 + 0.25, x1 - 0.25) if i % 2 == 0 else (x1 - 0.25, x0 + 0.25)
        pts.extend([(xs[0], y), (xs[1], y)])
    pts = np.asarray(pts)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    ang = np.tile([attitude.altitude, attitude.azimuth, attitude.roll], (len(pts), 1))
    return TrajectoryScript([Stroke(pts, lead_in + s / speed, ang)], lead_in=lead_in)


def concatenate_scripts(scripts, gap: float = 3.0) -> TrajectoryScript:
    """Play scripts back to back, ``gap`` seconds of pen-up between them."""
    strokes, offset = [], 0.0
    lead_in = scripts[0].lead_in if scripts else 3.0
    for i, sc in enumerate(scripts):
        shift = 0.0 if i == 0 else offset + gap - sc.strokes[0].begin
        for s in sc.strokes:
            strokes.append(Stroke(s.xy.copy(), s.t + shift, s.angles.copy()))
        offset = strokes[-1].end
    return TrajectoryScript(strokes, lead_in=lead_in, lead_out=scripts[-1].lead_out if scripts else 3.0)


@dataclass
class GlyphSpec:
    """Parameters for one scripted glyph (used to build training sets)."""

    glyph: str
    cell: int = 2
    size: float = 40.0
    speed: float = 40.0
    attitude: tuple = (60.0, 110.0, 0.0)
    attitude_end: tuple | None = None
    extra: dict = field(default_factory=dict)

    def script(self, screen: ScreenConfig, start_time: float = 3.0) -> TrajectoryScript:
        a0 = AttitudeAngles(*self.attitude)
        a1 = AttitudeAngles(*self.attitude_end) if self.attitude_end is not None else None
        return script_glyph(self.glyph, screen, self.cell, self.size, self.speed,
                            a0, a1, start_time=start_time, **self.extra)
