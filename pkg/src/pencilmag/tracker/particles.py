"""Six-component particle filter over tip position and pencil orientation.

Each particle is ``(x, y, qw, qx, qy, qz)``. Particles keep their full state
history; histories are stored once per timestamp together with the index of
each particle's parent, and a particle's path is recovered by walking the
parents back. Resampled particles therefore behave as independent copies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from ..geometry import (
    ALTITUDE_RANGE,
    AZIMUTH_RANGE,
    Quaternion,
    ScreenConfig,
    angles_to_quats,
    quat_to_matrix,
    quats_in_range,
    quats_to_angles,
)
from ..logs import MagLog, Trace
from ..magmap import VoxelField, query_pencil_map_batch
from .behavior import STATE_DIM, WINDOW, WritingBehaviorModel

log = logging.getLogger(__name__)


class DegenerateWeightsError(RuntimeError):
    """Every particle has zero weight."""


@dataclass(frozen=True)
class ParticleState:
    x: float
    y: float
    q: Quaternion

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.x, self.y], self.q.as_array()])

    @classmethod
    def from_array(cls, s) -> "ParticleState":
        return cls(float(s[0]), float(s[1]), Quaternion.from_array(s[2:6]))


@dataclass(frozen=True)
class TrackerConfig:
    """Particle counts, likelihood bandwidth, motion noise and KLD settings.

    The defaults are sized for a desk-scale screen. :meth:`device_scale`
    gives the initial/capped counts used on the real device.
    """

    n_initial: int = 200_000
    k_max: int = 20_000
    sigma: float = 0.5  # uT
    pos_noise: float = 0.4  # mm per step
    quat_noise: float = 0.01  # per quaternion component per step
    kld_epsilon: float = 0.05
    kld_delta: float = 0.01
    pos_bin: float = 5.0  # mm
    quat_bin: float = 0.1
    batch: int = 1000
    n_min: int = 500
    max_redraws: int = 10
    # 2D filter
    n_particles_2d: int = 4000
    pos_noise_2d: float = 1.0
    sigma_2d: float | None = None

    def __post_init__(self):
        if not 0 < self.k_max <= self.n_initial:
            raise ValueError("need 0 < k_max <= n_initial")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not (0 < self.kld_epsilon < 1 and 0 < self.kld_delta < 1):
            raise ValueError("KLD epsilon and delta must lie in (0, 1)")
        if self.n_min < 1 or self.batch < 1:
            raise ValueError("n_min and batch must be positive")

    @classmethod
    def device_scale(cls, **overrides) -> "TrackerConfig":
        return replace(cls(n_initial=5_000_000, k_max=50_000), **overrides)


@dataclass
class ParticleSet:
    """Current particles plus the shared genealogy.

    ``recent`` holds each particle's last ``WINDOW + 1`` states (oldest first)
    for the behaviour model; ``age`` is how many of those are real.
    """

    states: np.ndarray  # (n, 6)
    weights: np.ndarray  # (n,)
    recent: np.ndarray  # (n, WINDOW + 1, 6)
    age: int
    levels: list = field(default_factory=list)  # per timestamp: states (m, 6)
    parents: list = field(default_factory=list)  # per timestamp: (m,) index into previous level
    current: np.ndarray = None  # (n,) index of each particle in the last level
    log_w: np.ndarray = None  # unnormalised log weights from the last weighting

    def __len__(self):
        return len(self.states)

    @property
    def steps(self) -> int:
        """Number of processed timestamps (length of every history)."""
        return len(self.levels)

    def history(self, i: int) -> np.ndarray:
        """Full ``(steps, 6)`` state history of particle ``i``."""
        out = np.empty((self.steps, STATE_DIM))
        j = int(self.current[i])
        for level in range(self.steps - 1, -1, -1):
            out[level] = self.levels[level][j]
            j = int(self.parents[level][j]) if level > 0 else j
        return out

    def particle(self, i: int) -> ParticleState:
        return ParticleState.from_array(self.states[i])

    def take(self, idx: np.ndarray) -> "ParticleSet":
        """Copies of the particles at ``idx`` (histories included) with uniform weights."""
        idx = np.asarray(idx)
        return ParticleSet(
            states=self.states[idx].copy(),
            weights=np.full(len(idx), 1.0 / max(len(idx), 1)),
            recent=self.recent[idx].copy(),
            age=self.age,
            levels=list(self.levels),
            parents=list(self.parents),
            current=self.current[idx].copy(),
        )

    def push(self, new_states: np.ndarray) -> None:
        """Append one timestamp to every particle's history."""
        self.levels.append(new_states.copy())
        self.parents.append(self.current.copy())
        self.current = np.arange(len(new_states))
        self.states = new_states
        self.recent = np.concatenate([self.recent[:, 1:], new_states[:, None, :]], axis=1)
        self.age += 1

    def compact(self) -> None:
        """Drop genealogy entries no live particle descends from."""
        keep = np.unique(self.current)
        remap = np.full(len(self.levels[-1]), -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        self.current = remap[self.current]
        for level in range(self.steps - 1, -1, -1):
            parents = self.parents[level][keep]
            self.levels[level] = self.levels[level][keep]
            if level > 0:
                prev_keep = np.unique(parents)
                prev_remap = np.full(len(self.levels[level - 1]), -1, dtype=np.int64)
                prev_remap[prev_keep] = np.arange(len(prev_keep))
                self.parents[level] = prev_remap[parents]
                keep = prev_keep
            else:
                self.parents[level] = parents


# ---------------------------------------------------------------------------
# weights


def log_weights(states: np.ndarray, reading, vmap: VoxelField, screen: ScreenConfig, sigma: float) -> np.ndarray:
    """Log of ``exp(-|m - r|^2 / (2 sigma^2))``; ``-inf`` off the map."""
    rot = quat_to_matrix(states[:, 2:6])
    offset = screen.m_loc - np.column_stack([states[:, :2], np.zeros(len(states))])
    m_prime_loc = np.einsum("nji,nj->ni", rot, offset)
    m_prime = query_pencil_map_batch(vmap, m_prime_loc)
    m = np.einsum("nij,nj->ni", rot, m_prime)
    resid = np.sum((m - np.asarray(reading, dtype=float)) ** 2, axis=1)
    lw = -resid / (2.0 * sigma * sigma)
    lw[~np.isfinite(lw)] = -np.inf
    return lw


def compute_weight(s, reading, vmap: VoxelField, screen: ScreenConfig, sigma: float = 0.5) -> float:
    """Likelihood of one reading for one particle state; 0 off the map."""
    arr = s.as_array() if isinstance(s, ParticleState) else np.asarray(s, dtype=float)
    return float(np.exp(log_weights(arr.reshape(1, STATE_DIM), reading, vmap, screen, sigma)[0]))


def _normalise(lw: np.ndarray) -> np.ndarray:
    top = np.max(lw)
    if not np.isfinite(top):
        raise DegenerateWeightsError("all particle weights are zero")
    w = np.exp(lw - top)
    return w / w.sum()


# ---------------------------------------------------------------------------
# initialisation and motion


def sample_states(n: int, screen: ScreenConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform tips on the screen and uniform attitude angles in range."""
    xy = rng.uniform([0.0, 0.0], [screen.width, screen.height], size=(n, 2))
    angles = np.column_stack([
        rng.uniform(*ALTITUDE_RANGE, size=n),
        rng.uniform(*AZIMUTH_RANGE, size=n),
        rng.uniform(0.0, 360.0, size=n),
    ])
    return np.column_stack([xy, angles_to_quats(angles)])


def init_particles(cfg: TrackerConfig, vmap: VoxelField, screen: ScreenConfig, reading,
                   rng: np.random.Generator, chunk: int = 250_000) -> ParticleSet:
    """Draw ``n_initial`` states, weight them against ``reading`` and keep
    the ``k_max`` best (all of them when ``k_max == n_initial``)."""
    keep_states = np.zeros((0, STATE_DIM))
    keep_lw = np.zeros(0)
    remaining = cfg.n_initial
    while remaining > 0:
        n = min(chunk, remaining)
        remaining -= n
        s = sample_states(n, screen, rng)
        lw = log_weights(s, reading, vmap, screen, cfg.sigma)
        keep_states = np.vstack([keep_states, s])
        keep_lw = np.concatenate([keep_lw, lw])
        if len(keep_lw) > cfg.k_max:
            top = np.argpartition(-keep_lw, cfg.k_max - 1)[: cfg.k_max]
            top = top[np.argsort(-keep_lw[top], kind="stable")]
            keep_states, keep_lw = keep_states[top], keep_lw[top]
    if not np.any(np.isfinite(keep_lw)):
        raise DegenerateWeightsError("no initial particle lands on the map")
    n = len(keep_states)
    recent = np.repeat(keep_states[:, None, :], WINDOW + 1, axis=1)
    return ParticleSet(
        states=keep_states,
        weights=np.full(n, 1.0 / n),
        recent=recent,
        age=1,
        levels=[keep_states.copy()],
        parents=[np.arange(n)],
        current=np.arange(n),
        log_w=keep_lw,
    )


def behaviour_features(recent: np.ndarray, age: int) -> np.ndarray:
    """Previous three deltas (oldest first); deltas older than the history are zero."""
    d = np.diff(recent, axis=1)  # (n, WINDOW, 6)
    missing = max(0, WINDOW - (age - 1))
    if missing:
        d = d.copy()
        d[:, :missing] = 0.0
    return d.reshape(len(recent), -1)


_CLAMP_MARGIN = 1e-7


def _valid(states: np.ndarray, screen: ScreenConfig) -> np.ndarray:
    return screen.contains(states[:, 0], states[:, 1]) & quats_in_range(states[:, 2:6])


def _clamp(states: np.ndarray, prev: np.ndarray, screen: ScreenConfig) -> np.ndarray:
    out = states.copy()
    out[:, 0] = np.clip(out[:, 0], 0.0, screen.width)
    out[:, 1] = np.clip(out[:, 1], 0.0, screen.height)
    ang = quats_to_angles(out[:, 2:6])
    # stay a hair inside so the quaternion round trip cannot land outside
    ang[:, 0] = np.clip(ang[:, 0], ALTITUDE_RANGE[0] + _CLAMP_MARGIN, ALTITUDE_RANGE[1])
    ang[:, 1] = np.clip(ang[:, 1], AZIMUTH_RANGE[0] + _CLAMP_MARGIN, AZIMUTH_RANGE[1] - _CLAMP_MARGIN)
    q = angles_to_quats(ang)
    flip = np.sum(q * prev[:, 2:6], axis=1) < 0
    q[flip] *= -1.0
    out[:, 2:6] = q
    return out


def transition(ps: ParticleSet, model: WritingBehaviorModel | None, cfg: TrackerConfig,
               screen: ScreenConfig, rng: np.random.Generator,
               noise_scale: float = 1.0) -> ParticleSet:
    """``s_{t+1} = s_t + v_t + b_t`` for every particle, then extend histories.

    ``v_t`` comes from the behaviour model, ``b_t`` is Gaussian. Invalid
    proposals are redrawn up to ``max_redraws`` times, then clamped.
    """
    n = len(ps)
    prev = ps.states
    if model is None:
        v = np.zeros((n, STATE_DIM))
    else:
        v = model.predict(behaviour_features(ps.recent, ps.age))
    scale = noise_scale * np.array([cfg.pos_noise] * 2 + [cfg.quat_noise] * 4)

    def propose(idx):
        b = rng.normal(size=(len(idx), STATE_DIM)) * scale if noise_scale > 0 else 0.0
        s = prev[idx] + v[idx] + b
        s[:, 2:6] /= np.linalg.norm(s[:, 2:6], axis=1, keepdims=True)
        return s

    new = propose(np.arange(n))
    bad = np.nonzero(~_valid(new, screen))[0]
    for _ in range(cfg.max_redraws):
        if bad.size == 0:
            break
        new[bad] = propose(bad)
        bad = bad[~_valid(new[bad], screen)]
    if bad.size:
        new[bad] = _clamp(new[bad], prev[bad], screen)
    ps.push(new)
    return ps


# ---------------------------------------------------------------------------
# KLD resampling


def kld_sample_size(k: int, epsilon: float, delta: float, n_min: int, n_max: int | None = None) -> int:
    """Particles needed so the KL divergence to the true posterior stays
    below ``epsilon`` with probability ``1 - delta`` given ``k`` occupied bins."""
    if not (0 < epsilon < 1 and 0 < delta < 1):
        raise ValueError("epsilon and delta must lie in (0, 1)")
    if k <= 1:
        n = n_min
    else:
        z = norm.ppf(1.0 - delta)
        a = 2.0 / (9.0 * (k - 1))
        n = int(np.ceil((k - 1) / (2.0 * epsilon) * (1.0 - a + np.sqrt(a) * z) ** 3))
        n = max(n, n_min)
    if n_max is not None:
        n = min(n, n_max)
    return n


def bin_keys(states: np.ndarray, pos_bin: float, quat_bin: float) -> np.ndarray:
    q = states[:, 2:6] * np.where(states[:, 2:3] < 0, -1.0, 1.0)
    return np.column_stack([
        np.floor(states[:, :2] / pos_bin),
        np.floor(q / quat_bin),
    ]).astype(np.int64)


_HASH_MULT = np.array([0x9E3779B97F4A7C15, 0xC2B2AE3D27D4EB4F, 0x165667B19E3779F9,
                       0x27D4EB2F165667C5, 0x94D049BB133111EB, 0xBF58476D1CE4E5B9], dtype=np.uint64)


def _hash_keys(keys: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.sum(keys.astype(np.uint64) * _HASH_MULT[: keys.shape[1]], axis=1, dtype=np.uint64)


def _kld_required(k: np.ndarray, cfg: TrackerConfig) -> np.ndarray:
    z = norm.ppf(1.0 - cfg.kld_delta)
    k = np.asarray(k, dtype=float)
    km1 = np.maximum(k - 1.0, 1.0)
    a = 2.0 / (9.0 * km1)
    n = np.ceil(km1 / (2.0 * cfg.kld_epsilon) * (1.0 - a + np.sqrt(a) * z) ** 3)
    n = np.where(k <= 1, cfg.n_min, np.maximum(n, cfg.n_min))
    return np.minimum(n, cfg.k_max).astype(np.int64)


def resample(ps: ParticleSet, cfg: TrackerConfig, rng: np.random.Generator) -> ParticleSet:
    """KLD-adaptive importance resampling, drawn in batches of ``cfg.batch``.

    Draws continue until the number drawn reaches the KLD bound for the bins
    occupied so far (never below ``n_min``) or ``k_max``.
    """
    w = np.asarray(ps.weights, dtype=float)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise DegenerateWeightsError("total particle weight is zero")
    cdf = np.cumsum(w / total)
    cdf[-1] = 1.0
    drawn = np.zeros(0, dtype=np.int64)
    seen = np.zeros(0, dtype=np.uint64)
    opened = np.zeros(0, dtype=np.int64)  # draw positions that opened a new bin
    while True:
        m = min(cfg.batch, cfg.k_max - len(drawn))
        idx = np.minimum(np.searchsorted(cdf, rng.random(m), side="right"), len(w) - 1)
        h = _hash_keys(bin_keys(ps.states[idx], cfg.pos_bin, cfg.quat_bin))
        uniq, first = np.unique(h, return_index=True)
        fresh = ~np.isin(uniq, seen, assume_unique=True)
        base = len(drawn)
        opened = np.concatenate([opened, np.sort(first[fresh]) + base])
        seen = np.concatenate([seen, uniq[fresh]])
        drawn = np.concatenate([drawn, idx])
        pos = np.arange(base, len(drawn))
        k_after = np.searchsorted(opened, pos, side="right")
        done = np.nonzero(pos + 1 >= _kld_required(k_after, cfg))[0]
        if done.size:
            n_out = int(pos[done[0]] + 1)
            break
        if len(drawn) >= cfg.k_max:
            n_out = cfg.k_max
            break
    return ps.take(drawn[:n_out])


# ---------------------------------------------------------------------------
# stroke tracking


@dataclass
class TrackResult:
    trace: Trace
    particle_counts: list
    best_history: np.ndarray


def track_stroke(mag_segment: MagLog, vmap: VoxelField, screen: ScreenConfig,
                 model: WritingBehaviorModel | None, cfg: TrackerConfig,
                 rng: np.random.Generator, compact_every: int = 25) -> TrackResult:
    """Track one pen-down segment of ambient-free magnetometer readings.

    Returns the tip path of the highest-weight particle at the final
    timestamp, one point per reading.
    """
    if len(mag_segment) == 0:
        raise ValueError("empty magnetometer segment")
    readings = mag_segment.values
    ps = init_particles(cfg, vmap, screen, readings[0], rng)
    counts = [len(ps)]
    lw = ps.log_w
    for t in range(1, len(readings)):
        transition(ps, model, cfg, screen, rng)
        lw = log_weights(ps.states, readings[t], vmap, screen, cfg.sigma)
        ps.log_w = lw
        ps.weights = _normalise(lw)
        if t < len(readings) - 1:
            ps = resample(ps, cfg, rng)
            counts.append(len(ps))
            if compact_every and t % compact_every == 0:
                ps.compact()
    best = int(np.argmax(lw))
    hist = ps.history(best)
    trace = Trace(np.asarray(mag_segment.t, dtype=float).copy(), hist[:, :2].copy())
    return TrackResult(trace, counts, hist)
