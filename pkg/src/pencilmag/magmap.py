"""Magnetic maps: the screen-indexed 2D map and the pencil-frame voxel map.

The voxel map is indexed by the magnetometer position expressed in pencil
coordinates. Sparse or noisy maps are reconstructed by minimising a data
fidelity term plus L1 penalties on the discrete curl and divergence.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize, sparse

from .geometry import angles_to_matrix
from .logs import MagLog, PoseLog, TouchLog

log = logging.getLogger(__name__)

MAP_FORMAT = "pencilmag.voxelfield"
MAP_VERSION = 1
DEFAULT_CELL = 5.0
HUBER_DELTA = 1e-3  # uT / mm
LAMBDA_CURL_GRID = (0.0, 0.01, 0.1, 0.3)
LAMBDA_DIV_GRID = (0.3, 1.0, 1.5, 3.0)


class OutOfExtentError(LookupError):
    """Query position lies outside the mapped region."""


# ---------------------------------------------------------------------------
# containers


@dataclass
class WarDriveLog:
    """Aligned map-building rows: tip ``(n, 3)`` mm, orientation ``(n, 3, 3)``
    (rows are the pencil axes), ambient-free field ``(n, 3)`` uT."""

    t: np.ndarray
    tip: np.ndarray
    axes: np.ndarray
    field: np.ndarray

    def __len__(self):
        return len(self.t)

    def take(self, idx) -> "WarDriveLog":
        return WarDriveLog(self.t[idx], self.tip[idx], self.axes[idx], self.field[idx])


@dataclass
class VoxelField:
    """Mean field per voxel in the pencil frame.

    ``origin`` is the low corner of the box, cell ``(i, j, k)`` is centred at
    ``origin + (i + 0.5, j + 0.5, k + 0.5) * cell_size``. ``valid`` marks
    cells that hold a value (observed, or filled by reconstruction).
    """

    origin: np.ndarray
    cell_size: float
    mean: np.ndarray
    count: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.valid is None:
            self.valid = self.count > 0
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("voxel means must be finite")

    @property
    def dims(self) -> tuple:
        return tuple(self.count.shape)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.cell_size

    def centers(self) -> np.ndarray:
        axes = [self.origin[k] + (np.arange(self.dims[k]) + 0.5) * self.cell_size for k in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def cell_index(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.floor((p - self.origin) / self.cell_size).astype(np.int64)

    def to_dict(self) -> dict:
        nx, ny, nz = self.dims
        # x-fastest flattening
        m = self.mean.transpose(2, 1, 0, 3).reshape(-1, 3)
        c = self.count.transpose(2, 1, 0).reshape(-1)
        v = self.valid.transpose(2, 1, 0).reshape(-1)
        return {
            "format": MAP_FORMAT,
            "version": MAP_VERSION,
            "origin": [float(x) for x in self.origin],
            "cell_size": float(self.cell_size),
            "dims": [nx, ny, nz],
            "units": {"position": "mm", "field": "uT"},
            "order": "x-fastest",
            "cells": [[float(a), float(b), float(d), int(n), bool(ok)]
                      for (a, b, d), n, ok in zip(m, c, v)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "VoxelField":
        if doc.get("format") != MAP_FORMAT:
            raise ValueError("not a voxel field document")
        if int(doc.get("version", -1)) != MAP_VERSION:
            raise ValueError(f"unsupported voxel field version {doc.get('version')}")
        nx, ny, nz = (int(d) for d in doc["dims"])
        cells = np.asarray(doc["cells"], dtype=float).reshape(nz, ny, nx, 5)
        cells = cells.transpose(2, 1, 0, 3)
        return cls(
            origin=np.asarray(doc["origin"], dtype=float),
            cell_size=float(doc["cell_size"]),
            mean=np.ascontiguousarray(cells[..., :3]),
            count=cells[..., 3].astype(np.int64),
            valid=cells[..., 4] > 0.5,
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "VoxelField":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ScreenMap2D:
    """Mean screen-frame field per screen cell; same centre convention as
    :class:`VoxelField`."""

    origin: np.ndarray
    cell_size: float
    mean: np.ndarray
    count: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.valid is None:
            self.valid = self.count > 0

    @property
    def dims(self) -> tuple:
        return tuple(self.count.shape)

    def to_dict(self) -> dict:
        nx, ny = self.dims
        m = self.mean.transpose(1, 0, 2).reshape(-1, 3)
        c = self.count.transpose(1, 0).reshape(-1)
        return {
            "format": "pencilmag.screenmap2d",
            "version": 1,
            "origin": [float(x) for x in self.origin],
            "cell_size": float(self.cell_size),
            "dims": [nx, ny],
            "cells": [[float(a), float(b), float(d), int(n)] for (a, b, d), n in zip(m, c)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ScreenMap2D":
        nx, ny = (int(d) for d in doc["dims"])
        cells = np.asarray(doc["cells"], dtype=float).reshape(ny, nx, 4).transpose(1, 0, 2)
        return cls(np.asarray(doc["origin"]), float(doc["cell_size"]),
                   np.ascontiguousarray(cells[..., :3]), cells[..., 3].astype(np.int64))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ScreenMap2D":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ReconstructionConfig:
    """Weights and stopping rule for :func:`reconstruct`.

    The weights are dimensionless: the energy is evaluated on the field
    divided by the RMS of the observed cells, with finite differences taken
    per cell.
    """

    lambda_curl: float = 0.1
    lambda_div: float = 1.5
    max_iters: int = 2000
    tol: float = 1e-9
    huber_delta: float = HUBER_DELTA

    def __post_init__(self):
        if self.lambda_curl < 0 or self.lambda_div < 0:
            raise ValueError("regularisation weights must be >= 0")


@dataclass
class ReconstructionResult:
    field: VoxelField
    converged: bool
    energies: list = field(default_factory=list)
    iterations: int = 0


# ---------------------------------------------------------------------------
# stream handling


def estimate_ambient(mag: MagLog, quiet_interval) -> np.ndarray:
    """Mean reading over a pencil-free interval ``(t0, t1)``."""
    t0, t1 = quiet_interval
    sel = (mag.t >= t0) & (mag.t <= t1)
    n = int(np.count_nonzero(sel))
    if n < 10:
        raise ValueError(f"quiet interval holds {n} samples, need at least 10")
    return mag.values[sel].mean(axis=0)


def _nearest(t_ref: np.ndarray, t_query: np.ndarray):
    """Index into sorted ``t_ref`` of the nearest sample and its time error."""
    pos = np.searchsorted(t_ref, t_query)
    lo = np.clip(pos - 1, 0, len(t_ref) - 1)
    hi = np.clip(pos, 0, len(t_ref) - 1)
    pick = np.where(np.abs(t_ref[hi] - t_query) < np.abs(t_ref[lo] - t_query), hi, lo)
    return pick, np.abs(t_ref[pick] - t_query)


def align_streams(
    touch: TouchLog,
    poses: PoseLog | None,
    mag: MagLog,
    ambient=None,
    touch_tolerance: float = 0.5 / 120.0,
    pose_tolerance: float = 1.0 / 50.0,
) -> WarDriveLog:
    """Pair every pen-down magnetometer sample with the nearest touch and pose.

    A magnetometer sample counts as pen-down when a touch record lies within
    ``touch_tolerance`` (half a touch period by default). Without a pose log the pencil is taken as vertical.
    """
    empty = WarDriveLog(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)))
    if len(mag) == 0 or len(touch) == 0:
        return empty
    ti, terr = _nearest(touch.t, mag.t)
    keep = terr <= touch_tolerance + 1e-12
    if poses is not None:
        if len(poses) == 0:
            return empty
        pi, perr = _nearest(poses.t, mag.t)
        keep &= perr <= pose_tolerance + 1e-12
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return empty
    tip = np.column_stack([touch.xy[ti[idx]], np.zeros(idx.size)])
    if poses is not None:
        from .geometry import quat_to_matrix
        axes = np.swapaxes(quat_to_matrix(poses.quats[pi[idx]]), -1, -2)
    else:
        axes = np.broadcast_to(angles_to_matrix(90.0, 0.0, 0.0).T, (idx.size, 3, 3)).copy()
    m = mag.values[idx]
    if ambient is not None:
        m = m - np.asarray(ambient, dtype=float)
    return WarDriveLog(mag.t[idx], tip, axes, m)


# ---------------------------------------------------------------------------
# map building


def _grid_for(points: np.ndarray, cell: float, pad: int = 1):
    lo = np.floor(points.min(axis=0) / cell) - pad
    hi = np.floor(points.max(axis=0) / cell) + 1 + pad
    return lo * cell, tuple(int(d) for d in (hi - lo))


def _accumulate(idx_flat: np.ndarray, values: np.ndarray, n_cells: int):
    """Per-cell sums and counts, independent of row order."""
    order = np.lexsort((values[:, 2], values[:, 1], values[:, 0], idx_flat))
    idx_flat = idx_flat[order]
    values = values[order]
    counts = np.bincount(idx_flat, minlength=n_cells)
    sums = np.stack([np.bincount(idx_flat, weights=values[:, k], minlength=n_cells) for k in range(3)], axis=1)
    return sums, counts


def build_2d_map(log: WarDriveLog, cell: float = DEFAULT_CELL, pad: int = 0) -> ScreenMap2D:
    """Mean screen-frame reading per ``cell`` mm square of tip position."""
    if len(log) == 0:
        raise ValueError("cannot build a map from an empty log")
    xy = log.tip[:, :2]
    origin, dims = _grid_for(xy, cell, pad)
    ij = np.floor((xy - origin) / cell).astype(np.int64)
    flat = np.ravel_multi_index(ij.T, dims)
    sums, counts = _accumulate(flat, log.field, int(np.prod(dims)))
    mean = np.zeros_like(sums)
    ok = counts > 0
    mean[ok] = sums[ok] / counts[ok, None]
    return ScreenMap2D(origin, float(cell), mean.reshape(dims + (3,)), counts.reshape(dims))


def pencil_frame_positions(log: WarDriveLog, m_loc) -> np.ndarray:
    """``M'_loc`` for every row: ``P_s (M_loc - T_loc)``."""
    offset = np.asarray(m_loc, dtype=float) - log.tip
    return np.einsum("nij,nj->ni", log.axes, offset)


def build_pencil_map(log: WarDriveLog, m_loc, cell: float = DEFAULT_CELL, extent=None) -> VoxelField:
    """Deposit pencil-frame readings into ``cell`` mm voxels and average.

    ``extent`` may fix ``(origin, dims)``; by default the box is the bounding
    box of the samples on a lattice of ``cell``, padded by one cell.
    """
    if len(log) == 0:
        raise ValueError("cannot build a map from an empty log")
    pos = pencil_frame_positions(log, m_loc)
    m_prime = np.einsum("nij,nj->ni", log.axes, log.field)
    if extent is None:
        origin, dims = _grid_for(pos, cell, pad=1)
    else:
        origin, dims = np.asarray(extent[0], dtype=float), tuple(int(d) for d in extent[1])
    ijk = np.floor((pos - origin) / cell).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < np.asarray(dims)), axis=1)
    flat = np.ravel_multi_index(ijk[inside].T, dims)
    sums, counts = _accumulate(flat, m_prime[inside], int(np.prod(dims)))
    mean = np.zeros_like(sums)
    ok = counts > 0
    mean[ok] = sums[ok] / counts[ok, None]
    return VoxelField(origin, float(cell), mean.reshape(dims + (3,)), counts.reshape(dims))


# ---------------------------------------------------------------------------
# interpolation


def _multilinear(mean: np.ndarray, valid: np.ndarray, origin, cell: float, pts: np.ndarray) -> np.ndarray:
    """Interpolate cell-centred values; NaN rows are out of extent.

    Corners without data are dropped and the remaining weights renormalised.
    Points between the outermost centres and the box faces use the edge
    value along that axis.
    """
    d = pts.shape[1]
    dims = np.asarray(valid.shape)
    u = (pts - origin) / cell
    inside = np.all((u >= 0.0) & (u <= dims), axis=1)
    u = np.clip(u - 0.5, 0.0, dims - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(dims - 2, 0))
    frac = u - i0
    out = np.zeros((len(pts), mean.shape[-1]))
    wsum = np.zeros(len(pts))
    for corner in itertools.product((0, 1), repeat=d):
        c = np.asarray(corner)
        idx = np.minimum(i0 + c, dims - 1)
        w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        key = tuple(idx.T)
        w = w * valid[key]
        out += w[:, None] * mean[key]
        wsum += w
    good = inside & (wsum > 1e-12)
    out[good] /= wsum[good, None]
    out[~good] = np.nan
    return out


def query_pencil_map_batch(vf: VoxelField, pts) -> np.ndarray:
    """Trilinear lookup for ``(n, 3)`` positions; out-of-extent rows are NaN."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return _multilinear(vf.mean, vf.valid, vf.origin, vf.cell_size, pts)


def query_pencil_map(vf: VoxelField, m_prime_loc) -> np.ndarray:
    out = query_pencil_map_batch(vf, np.asarray(m_prime_loc, dtype=float).reshape(1, 3))[0]
    if np.isnan(out[0]):
        raise OutOfExtentError(f"position {m_prime_loc} outside the pencil map")
    return out


def query_2d_batch(m2: ScreenMap2D, xy) -> np.ndarray:
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    return _multilinear(m2.mean, m2.valid, m2.origin, m2.cell_size, xy)


def query_2d(m2: ScreenMap2D, x: float, y: float) -> np.ndarray:
    out = query_2d_batch(m2, [[x, y]])[0]
    if np.isnan(out[0]):
        raise OutOfExtentError(f"({x}, {y}) outside the 2D map")
    return out


# ---------------------------------------------------------------------------
# differential operators


def _diff_1d(n: int, h: float) -> sparse.csr_matrix:
    """First derivative: central inside, one-sided at both ends."""
    if n < 2:
        return sparse.csr_matrix((n, n))
    rows, cols, vals = [0, 0], [0, 1], [-1.0 / h, 1.0 / h]
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5 / h, 0.5 / h]
    rows += [n - 1, n - 1]
    cols += [n - 2, n - 1]
    vals += [-1.0 / h, 1.0 / h]
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def derivative_operators(dims, h: float = 1.0):
    """Sparse ``(d/dx, d/dy, d/dz)`` acting on C-order flattened grids."""
    nx, ny, nz = dims
    ix, iy, iz = (sparse.identity(n, format="csr") for n in dims)
    dx = sparse.kron(sparse.kron(_diff_1d(nx, h), iy), iz, format="csr")
    dy = sparse.kron(sparse.kron(ix, _diff_1d(ny, h)), iz, format="csr")
    dz = sparse.kron(sparse.kron(ix, iy), _diff_1d(nz, h), format="csr")
    return dx, dy, dz


def div_curl_operator(dims, h: float = 1.0) -> sparse.csr_matrix:
    """Stacked ``[div; curl_x; curl_y; curl_z]`` acting on ``[gx; gy; gz]``."""
    dx, dy, dz = derivative_operators(dims, h)
    z = sparse.csr_matrix(dx.shape)
    return sparse.bmat([
        [dx, dy, dz],
        [z, -dz, dy],
        [dz, z, -dx],
        [-dy, dx, z],
    ], format="csr")


def discrete_div_curl(vf: VoxelField, spacing: float | None = None):
    """Divergence ``(nx, ny, nz)`` and curl ``(nx, ny, nz, 3)`` of the map.

    Differences are taken over ``spacing`` (default: the cell size), so the
    units are uT/mm for a field in uT.
    """
    h = vf.cell_size if spacing is None else spacing
    if min(vf.dims) < 2:
        raise ValueError("need at least two cells per axis")
    n = int(np.prod(vf.dims))
    op = div_curl_operator(vf.dims, h)
    g = vf.mean.reshape(n, 3).T.reshape(-1)
    out = (op @ g).reshape(4, n)
    div = out[0].reshape(vf.dims)
    curl = out[1:].T.reshape(vf.dims + (3,))
    return div, curl


# ---------------------------------------------------------------------------
# reconstruction


def _huber(x: np.ndarray, delta: float):
    ax = np.abs(x)
    val = np.where(ax <= delta, 0.5 * x * x / delta, ax - 0.5 * delta)
    grad = np.clip(x / delta, -1.0, 1.0)
    return val, grad


def nearest_fill(vf: VoxelField) -> np.ndarray:
    """Copy every empty cell's value from its nearest observed cell."""
    if not np.any(vf.valid):
        raise ValueError("map has no observed cells")
    _, idx = ndimage.distance_transform_edt(~vf.valid, return_indices=True)
    return vf.mean[tuple(idx)]


class _Energy:
    """Normalised energy and gradient over flattened ``[gx; gy; gz]``."""

    def __init__(self, vf: VoxelField, cfg: ReconstructionConfig, observed: np.ndarray):
        self.n = int(np.prod(vf.dims))
        self.obs = observed.reshape(-1)
        f = vf.mean.reshape(self.n, 3)
        self.scale = float(np.sqrt(np.mean(f[self.obs] ** 2))) or 1.0
        self.f = (f / self.scale).T.reshape(-1)
        self.mask = np.tile(self.obs, 3).astype(float)
        self.op = div_curl_operator(vf.dims, 1.0)
        self.op_t = self.op.T.tocsr()
        self.delta = cfg.huber_delta * vf.cell_size / self.scale
        w = np.empty(4 * self.n)
        w[: self.n] = cfg.lambda_div
        w[self.n:] = cfg.lambda_curl
        self.weights = w
        self._last = None

    def __call__(self, g: np.ndarray):
        r = self.mask * (g - self.f)
        dc = self.op @ g
        hv, hg = _huber(dc, self.delta)
        val = float(r @ r + self.weights @ hv)
        grad = 2.0 * r + self.op_t @ (self.weights * hg)
        self._last = (g.copy(), val)
        return val, grad

    def value(self, g: np.ndarray) -> float:
        if self._last is not None and np.array_equal(self._last[0], g):
            return self._last[1]
        return self(g)[0]

    def pack(self, values: np.ndarray) -> np.ndarray:
        return (values.reshape(self.n, 3) / self.scale).T.reshape(-1)

    def unpack(self, g: np.ndarray) -> np.ndarray:
        return g.reshape(3, self.n).T * self.scale


def energy(vf: VoxelField, candidate: np.ndarray, cfg: ReconstructionConfig, observed=None) -> float:
    """Normalised energy of ``candidate`` (same shape as ``vf.mean``)."""
    observed = vf.valid if observed is None else observed
    e = _Energy(vf, cfg, observed)
    return e(e.pack(candidate))[0]


def reconstruct(vf: VoxelField, cfg: ReconstructionConfig | None = None, observed=None) -> ReconstructionResult:
    """Fill and denoise a voxel map.

    Minimises ``sum_obs |g - f|^2 + lambda_curl |curl g|_1 + lambda_div |div g|_1``
    with the absolute values Huber-smoothed, using L-BFGS from a
    nearest-neighbour filled start. ``observed`` overrides which cells enter
    the data term (default: ``vf.valid``).
    """
    cfg = cfg or ReconstructionConfig()
    observed = vf.valid if observed is None else np.asarray(observed, dtype=bool)
    if not np.any(observed):
        raise ValueError("map has no observed cells")
    start = nearest_fill(VoxelField(vf.origin, vf.cell_size, vf.mean, vf.count, observed))
    e = _Energy(vf, cfg, observed)
    g0 = e.pack(start)
    energies = [e(g0)[0]]

    def record(xk):
        energies.append(e.value(xk))

    res = optimize.minimize(
        e, g0, jac=True, method="L-BFGS-B", callback=record,
        options={"maxiter": cfg.max_iters, "ftol": cfg.tol, "gtol": 1e-12, "maxcor": 20},
    )
    g = res.x if res.fun <= energies[0] else g0
    out = VoxelField(vf.origin.copy(), vf.cell_size, e.unpack(g).reshape(vf.dims + (3,)),
                     vf.count.copy(), np.ones(vf.dims, dtype=bool))
    converged = bool(res.success) and res.nit < cfg.max_iters
    if not converged:
        log.info("reconstruction stopped after %d iterations: %s", res.nit, res.message)
    return ReconstructionResult(out, converged, energies, int(res.nit))


def default_lambda_grid():
    return [(c, d) for c in LAMBDA_CURL_GRID for d in LAMBDA_DIV_GRID]


def grid_search_lambda(vf: VoxelField, candidates=None, validation_mask=None, max_iters: int = 500,
                       rng: np.random.Generator | None = None):
    """Pick ``(lambda_curl, lambda_div)`` by held-out error on observed cells.

    Cells in ``validation_mask`` are hidden from the data term; the winner
    reproduces their stored means best. Without a mask, 10 % of the observed
    cells are held out at random.
    """
    candidates = list(candidates) if candidates is not None else default_lambda_grid()
    if not candidates:
        raise ValueError("need at least one candidate")
    if validation_mask is None:
        rng = rng or np.random.default_rng(0)
        validation_mask = vf.valid & (rng.random(vf.dims) < 0.1)
    validation_mask = np.asarray(validation_mask, dtype=bool) & vf.valid
    if not np.any(validation_mask):
        raise ValueError("validation mask selects no observed cell")
    if len(candidates) == 1:
        return tuple(candidates[0])
    train = vf.valid & ~validation_mask
    best, best_err = None, np.inf
    for lc, ld in candidates:
        cfg = ReconstructionConfig(lambda_curl=lc, lambda_div=ld, max_iters=max_iters)
        g = reconstruct(vf, cfg, observed=train).field.mean
        err = float(np.sum((g[validation_mask] - vf.mean[validation_mask]) ** 2))
        log.debug("lambda_curl=%g lambda_div=%g validation sse=%g", lc, ld, err)
        if err < best_err:
            best, best_err = (lc, ld), err
    return best
