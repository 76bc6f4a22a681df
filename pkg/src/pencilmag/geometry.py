"""Orientation representations and screen/pencil frame transforms.

Frames
------
Screen frame: origin at the top-left screen corner, X to the right, Y down the
screen, Z into the device (right-handed). Pencil frame: origin at the tip, Z
along the body from the tip towards the cap.

An orientation ``P_s`` is stored as a 3x3 array whose *rows* are the pencil
axes expressed in screen coordinates, so ``P_s @ v`` expresses a screen-frame
vector ``v`` in pencil coordinates and ``P_s.T @ v'`` goes back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALTITUDE_RANGE = (30.0, 90.0)
ALTITUDE_LIMITS = (0.0, 90.0)
AZIMUTH_RANGE = (60.0, 170.0)

_NORM_TOL = 1e-6
_VERTICAL_EPS = 1e-9


class InvalidInputError(ValueError):
    """Raised when an orientation is not a valid rotation."""


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion ``w + xi + yj + zk`` (active rotation, pencil -> screen)."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = float(np.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2))
        if not np.isfinite(n) or n == 0.0:
            raise InvalidInputError("quaternion has zero or non-finite norm")
        for name in "wxyz":
            object.__setattr__(self, name, float(getattr(self, name)) / n)

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q) -> "Quaternion":
        q = np.asarray(q, dtype=float)
        return cls(q[0], q[1], q[2], q[3])

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        s = np.sin(angle_rad / 2.0)
        return cls(np.cos(angle_rad / 2.0), *(axis * s))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.w, -self.x, -self.y, -self.z)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


@dataclass(frozen=True)
class RotationAxes:
    """Pencil axes as unit vectors in the screen frame."""

    x_axis: np.ndarray
    y_axis: np.ndarray
    z_axis: np.ndarray

    @classmethod
    def from_matrix(cls, p_s) -> "RotationAxes":
        p_s = np.asarray(p_s, dtype=float)
        return cls(p_s[0].copy(), p_s[1].copy(), p_s[2].copy())

    @classmethod
    def identity(cls) -> "RotationAxes":
        return cls.from_matrix(np.eye(3))

    def as_matrix(self) -> np.ndarray:
        """Return ``P_s`` with the axes as rows."""
        return np.vstack([self.x_axis, self.y_axis, self.z_axis])


@dataclass(frozen=True)
class AttitudeAngles:
    """Altitude, azimuth and roll in degrees.

    Altitude is the angle between the body and the screen plane (90 means
    perpendicular). Azimuth is the heading of the body's projection onto the
    screen, measured from +X towards +Y. Roll turns the pencil about its own Z.
    """

    altitude: float
    azimuth: float
    roll: float = 0.0

    def __post_init__(self):
        if not ALTITUDE_LIMITS[0] <= self.altitude <= ALTITUDE_LIMITS[1]:
            raise InvalidInputError(f"altitude {self.altitude} outside [0, 90]")
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)
        object.__setattr__(self, "roll", float(self.roll) % 360.0)



@dataclass(frozen=True)
class ScreenConfig:
    """Screen size (mm) and magnetometer location in the screen frame (mm)."""

    width: float = 200.0
    height: float = 150.0
    magnetometer: tuple = (100.0, 110.0, 5.0)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("screen width and height must be positive")
        object.__setattr__(self, "magnetometer", tuple(float(v) for v in self.magnetometer))

    @property
    def m_loc(self) -> np.ndarray:
        return np.asarray(self.magnetometer, dtype=float)

    def contains(self, x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= 0.0) & (x <= self.width) & (y >= 0.0) & (y <= self.height)

    def input_cell(self, index: int, n_cells: int = 3) -> tuple[float, float, float, float]:
        """Bounds ``(x0, y0, x1, y1)`` of a writing cell in the lower half.

        The lower half of the screen is split into ``n_cells`` equal columns,
        numbered from 1.
        """
        if not 1 <= index <= n_cells:
            raise InvalidInputError(f"cell index {index} outside 1..{n_cells}")
        w = self.width / n_cells
        return (w * (index - 1), self.height / 2.0, w * index, self.height)


@dataclass(frozen=True)
class PencilPose:
    tip: tuple
    orientation: Quaternion

    @property
    def t_loc(self) -> np.ndarray:
        return np.array([self.tip[0], self.tip[1], 0.0])


# ---------------------------------------------------------------------------
# batch kernels (leading axes broadcast)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices ``R`` (columns = pencil axes in screen frame)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_matrix`; output has ``w >= 0``."""
    r = np.asarray(r, dtype=float)
    flat = r.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    tr = flat[:, 0, 0] + flat[:, 1, 1] + flat[:, 2, 2]
    diag = np.stack([tr, flat[:, 0, 0], flat[:, 1, 1], flat[:, 2, 2]], axis=1)
    best = np.argmax(diag, axis=1)
    for case in range(4):
        idx = np.nonzero(best == case)[0]
        if idx.size == 0:
            continue
        m = flat[idx]
        if case == 0:
            s = np.sqrt(1.0 + tr[idx]) * 2.0
            q = [0.25 * s, (m[:, 2, 1] - m[:, 1, 2]) / s,
                 (m[:, 0, 2] - m[:, 2, 0]) / s, (m[:, 1, 0] - m[:, 0, 1]) / s]
        elif case == 1:
            s = np.sqrt(1.0 + m[:, 0, 0] - m[:, 1, 1] - m[:, 2, 2]) * 2.0
            q = [(m[:, 2, 1] - m[:, 1, 2]) / s, 0.25 * s,
                 (m[:, 0, 1] + m[:, 1, 0]) / s, (m[:, 0, 2] + m[:, 2, 0]) / s]
        elif case == 2:
            s = np.sqrt(1.0 + m[:, 1, 1] - m[:, 0, 0] - m[:, 2, 2]) * 2.0
            q = [(m[:, 0, 2] - m[:, 2, 0]) / s, (m[:, 0, 1] + m[:, 1, 0]) / s,
                 0.25 * s, (m[:, 1, 2] + m[:, 2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[:, 2, 2] - m[:, 0, 0] - m[:, 1, 1]) * 2.0
            q = [(m[:, 1, 0] - m[:, 0, 1]) / s, (m[:, 0, 2] + m[:, 2, 0]) / s,
                 (m[:, 1, 2] + m[:, 2, 1]) / s, 0.25 * s]
        out[idx] = np.stack(q, axis=1)
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    out[out[:, 0] < 0] *= -1.0
    return out.reshape(r.shape[:-2] + (4,))


def angles_to_matrix(altitude, azimuth, roll) -> np.ndarray:
    """Rotation matrices for attitude angles given in degrees.

    ``R = Rz(azimuth) Ry(altitude - 90) Rx(180) Rz(roll)``: start from a
    vertical pencil pointing out of the screen, roll about the body, tilt the
    body towards +X, then turn the heading.
    """
    a1 = np.radians(np.asarray(altitude, dtype=float))
    a2 = np.radians(np.asarray(azimuth, dtype=float))
    a3 = np.radians(np.asarray(roll, dtype=float))
    a1, a2, a3 = np.broadcast_arrays(a1, a2, a3)
    c1, s1 = np.cos(a1), np.sin(a1)
    c2, s2 = np.cos(a2), np.sin(a2)
    c3, s3 = np.cos(a3), np.sin(a3)
    # Ry(altitude - 90) @ Rx(180)
    ry_rx = np.zeros(a1.shape + (3, 3))
    ry_rx[..., 0, 0] = s1
    ry_rx[..., 0, 2] = c1
    ry_rx[..., 1, 1] = -1.0
    ry_rx[..., 2, 0] = c1
    ry_rx[..., 2, 2] = -s1
    rz_az = _rot_z(c2, s2)
    rz_roll = _rot_z(c3, s3)
    return rz_az @ ry_rx @ rz_roll


def _rot_z(c, s) -> np.ndarray:
    r = np.zeros(np.shape(c) + (3, 3))
    r[..., 0, 0] = c
    r[..., 0, 1] = -s
    r[..., 1, 0] = s
    r[..., 1, 1] = c
    r[..., 2, 2] = 1.0
    return r


def matrix_to_angles(r: np.ndarray) -> np.ndarray:
    """Attitude angles (degrees) ``[..., (altitude, azimuth, roll)]``.

    The altitude is returned unclipped so that pencils pointing into the
    screen come out negative. A vertical pencil reports azimuth 0 and folds
    the heading into the roll.
    """
    r = np.asarray(r, dtype=float)
    z = r[..., :, 2]
    alt = np.degrees(np.arcsin(np.clip(-z[..., 2], -1.0, 1.0)))
    horiz = np.hypot(z[..., 0], z[..., 1])
    vertical = horiz < _VERTICAL_EPS
    az = np.where(vertical, 0.0, np.degrees(np.arctan2(z[..., 1], z[..., 0])))
    az = np.mod(az, 360.0)
    base = angles_to_matrix(np.clip(alt, -90.0, 90.0), az, 0.0)
    m = np.swapaxes(base, -1, -2) @ r
    roll = np.mod(np.degrees(np.arctan2(m[..., 1, 0], m[..., 0, 0])), 360.0)
    az = np.where(az >= 360.0, 0.0, az)
    roll = np.where(roll >= 360.0, 0.0, roll)
    return np.stack([alt, az, roll], axis=-1)


def quats_to_angles(q: np.ndarray) -> np.ndarray:
    return matrix_to_angles(quat_to_matrix(q))


def angles_to_quats(angles: np.ndarray) -> np.ndarray:
    angles = np.asarray(angles, dtype=float)
    return matrix_to_quat(angles_to_matrix(angles[..., 0], angles[..., 1], angles[..., 2]))


def angles_in_range(angles: np.ndarray) -> np.ndarray:
    """Vectorised :func:`pose_in_range` on ``[..., 3]`` angle arrays."""
    angles = np.asarray(angles, dtype=float)
    alt, az = angles[..., 0], angles[..., 1]
    ok_alt = (alt >= ALTITUDE_RANGE[0]) & (alt <= ALTITUDE_RANGE[1])
    ok_az = (az >= AZIMUTH_RANGE[0]) & (az <= AZIMUTH_RANGE[1])
    return ok_alt & ok_az


def quats_in_range(q: np.ndarray) -> np.ndarray:
    """Range check evaluated on quaternions.

    A (numerically) vertical pencil has no heading, so only its altitude is
    checked.
    """
    r = quat_to_matrix(q)
    z = r[..., :, 2]
    alt = np.degrees(np.arcsin(np.clip(-z[..., 2], -1.0, 1.0)))
    az = np.mod(np.degrees(np.arctan2(z[..., 1], z[..., 0])), 360.0)
    ok_alt = (alt >= ALTITUDE_RANGE[0]) & (alt <= ALTITUDE_RANGE[1] + 1e-12)
    ok_az = (az >= AZIMUTH_RANGE[0]) & (az <= AZIMUTH_RANGE[1])
    vertical = np.hypot(z[..., 0], z[..., 1]) < 1e-6
    return ok_alt & (ok_az | vertical)


def hemisphere_align(q: np.ndarray) -> np.ndarray:
    """Flip signs along a sequence so consecutive dot products are >= 0."""
    q = np.array(q, dtype=float, copy=True)
    for i in range(1, len(q)):
        if np.dot(q[i], q[i - 1]) < 0.0:
            q[i] = -q[i]
    return q


def geodesic_angle(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Rotation angle (rad) between unit quaternions, sign-insensitive."""
    d = np.abs(np.sum(np.asarray(q1) * np.asarray(q2), axis=-1))
    return 2.0 * np.arccos(np.clip(d, 0.0, 1.0))


# ---------------------------------------------------------------------------
# scalar operations


def _check_unit(raw):
    if abs(np.linalg.norm(raw) - 1.0) > _NORM_TOL:
        raise InvalidInputError(f"quaternion norm {np.linalg.norm(raw):.6g} is not 1")


def quat_to_axes(q) -> RotationAxes:
    """Pencil axes for a unit quaternion.

    Accepts a :class:`Quaternion` or a raw 4-sequence; a raw value whose norm
    is off by more than 1e-6 raises :class:`InvalidInputError`.
    """
    if isinstance(q, Quaternion):
        arr = q.as_array()
    else:
        arr = np.asarray(q, dtype=float)
        _check_unit(arr)
    r = quat_to_matrix(arr)
    return RotationAxes.from_matrix(r.T)


def axes_to_quat(axes: RotationAxes) -> Quaternion:
    p_s = axes.as_matrix()
    if not np.allclose(p_s @ p_s.T, np.eye(3), atol=1e-6) or np.linalg.det(p_s) < 0:
        raise InvalidInputError("axes are not a right-handed orthonormal set")
    return Quaternion.from_array(matrix_to_quat(p_s.T))


def angles_to_axes(a: AttitudeAngles) -> RotationAxes:
    r = angles_to_matrix(a.altitude, a.azimuth, a.roll)
    return RotationAxes.from_matrix(r.T)


def axes_to_angles(axes: RotationAxes) -> AttitudeAngles:
    alt, az, roll = matrix_to_angles(axes.as_matrix().T)
    return AttitudeAngles(float(np.clip(alt, 0.0, 90.0)), float(az), float(roll))


def angles_to_quat(a: AttitudeAngles) -> Quaternion:
    return axes_to_quat(angles_to_axes(a))


def to_pencil_frame(m_loc, t_loc, p_s) -> np.ndarray:
    """Magnetometer position in pencil coordinates, ``P_s (M_loc - T_loc)``."""
    return _as_matrix(p_s) @ (np.asarray(m_loc, float) - _as_point(t_loc))


def field_to_pencil_frame(m, p_s) -> np.ndarray:
    return _as_matrix(p_s) @ np.asarray(m, dtype=float)


def field_to_screen_frame(m_prime, p_s) -> np.ndarray:
    return _as_matrix(p_s).T @ np.asarray(m_prime, dtype=float)


def tip_from_mag_position(m_loc, p_s, m_prime_loc) -> np.ndarray:
    """Tip location ``M_loc - P_s^T M'_loc`` that places the magnetometer at
    ``m_prime_loc`` for orientation ``p_s``."""
    return np.asarray(m_loc, float) - _as_matrix(p_s).T @ np.asarray(m_prime_loc, float)


def pose_in_range(a: AttitudeAngles) -> bool:
    """True when altitude and azimuth fall in the handwriting ranges; roll is free."""
    return bool(angles_in_range(np.array([a.altitude, a.azimuth, a.roll])))


def roll_about(p_s, axis, angle_rad: float) -> np.ndarray:
    """Rotate a pencil orientation rigidly about a screen-frame axis.

    Returns the new ``P_s`` (rows). Rolling about the direction of
    ``M_loc - T_loc`` and moving the tip accordingly keeps ``M'_loc`` fixed.
    """
    q = Quaternion.from_axis_angle(axis, angle_rad)
    rot = quat_to_matrix(q.as_array())
    return _as_matrix(p_s) @ rot.T


def _as_matrix(p_s) -> np.ndarray:
    if isinstance(p_s, RotationAxes):
        return p_s.as_matrix()
    return np.asarray(p_s, dtype=float)


def _as_point(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] == 2:
        p = np.concatenate([p, np.zeros(p.shape[:-1] + (1,))], axis=-1)
    return p
