"""Desk-scale synthetic manipulation proxy.

An episode shows two landmarks (object and distractor) on a plane plus an
instruction bit choosing which one is the target. The demonstrated action
chunk is H waypoints along one of two mirror-symmetric quadratic arcs from
the origin to the target; the latent arc mode makes the chunk distribution
bimodal on purpose, so distribution-collapsing predictors are measurably
different from mode-capturing ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flow import GaussianMixture
from .nn import RngStream, draw_normal, draw_uniform, rng_stream

Array = np.ndarray

# encoded observation layout: [object(2), distractor(2), state(3), instr one-hot(2)]
ENC_DIM = 9
STATE_SLICE = slice(4, 7)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    h: int = 8  # waypoints per chunk
    d: int = 2  # action dimension (planar)
    object_radius: tuple[float, float] = (0.5, 0.9)
    distractor_radius: tuple[float, float] = (0.5, 0.9)
    arc_mode_p: float = 0.5  # probability of the +1 (left-bulge) mode
    bulge: float = 0.3  # control-point offset as a fraction of |target|
    endpoint_radius: float = 0.15
    tube_radius: float = 0.25
    state_noise: float = 0.1
    n_train: int = 4096
    n_calib: int = 2048
    n_eval: int = 1024

    def __post_init__(self):
        for name in ("object_radius", "distractor_radius"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo < hi):
                raise ValueError(f"{name} must be a non-degenerate interval")
        if not (0.0 <= self.arc_mode_p <= 1.0):
            raise ValueError("arc_mode_p must be a probability")
        if self.endpoint_radius <= 0 or self.tube_radius <= 0:
            raise ValueError("tolerances must be positive")
        if self.h < 2 or self.d != 2:
            raise ValueError("need h >= 2 planar waypoints")

    @property
    def chunk_shape(self) -> tuple[int, int]:
        return (self.h, self.d)


@dataclass(frozen=True)
class Observation:
    object_pos: Array  # (2,)
    distractor_pos: Array  # (2,)
    state: Array  # (3,)
    instruction: int  # 0 -> object is the target, 1 -> distractor

    def target(self) -> Array:
        return self.object_pos if self.instruction == 0 else self.distractor_pos


@dataclass(frozen=True)
class Episode:
    obs: Observation
    mode: int  # +1 or -1, the latent arc side
    chunk: Array  # (H, D) demonstrated waypoints


def encode_obs(obs: Observation) -> Array:
    one_hot = np.zeros(2)
    one_hot[obs.instruction] = 1.0
    return np.concatenate([obs.object_pos, obs.distractor_pos, obs.state,
                           one_hot])


def encode_obs_batch(observations) -> Array:
    return np.stack([encode_obs(o) for o in observations])


def _perp(v: Array) -> Array:
    return np.array([-v[1], v[0]])


def _bezier(target: Array, mode: int, bulge: float, ts: Array) -> Array:
    """Quadratic Bezier from the origin to `target`, bulged to one side.

    Control point sits at the chord midpoint plus mode * bulge * |target|
    along the unit perpendicular, so the two modes are mirror images.
    """
    norm = np.linalg.norm(target)
    if norm == 0.0:
        raise ValueError("degenerate target at the origin")
    ctrl = 0.5 * target + mode * bulge * norm * (_perp(target) / norm)
    t = ts[:, None]
    return 2.0 * t * (1.0 - t) * ctrl[None, :] + t * t * target[None, :]


def arc_chunk(target: Array, mode: int, spec: SyntheticTaskSpec) -> Array:
    """The demonstrated H-waypoint chunk at t = k/H, k = 1..H."""
    ts = np.arange(1, spec.h + 1) / spec.h
    return _bezier(np.asarray(target, dtype=np.float64), mode, spec.bulge, ts)


def arc_polyline(target: Array, mode: int, spec: SyntheticTaskSpec,
                 n: int = 256) -> Array:
    """Dense polyline along the arc (t in [0, 1]) for distance queries."""
    ts = np.linspace(0.0, 1.0, n)
    return _bezier(np.asarray(target, dtype=np.float64), mode, spec.bulge, ts)


def _dist_to_polyline(points: Array, poly: Array) -> Array:
    """Distance from each point (M, 2) to a polyline (P, 2) of segments."""
    a = poly[:-1]  # (P-1, 2) segment starts
    ab = poly[1:] - a  # segment vectors
    ab2 = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    ap = points[:, None, :] - a[None, :, :]  # (M, P-1, 2)
    t = np.clip(np.sum(ap * ab[None, :, :], axis=-1) / ab2[None, :], 0.0, 1.0)
    proj = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    d = np.linalg.norm(points[:, None, :] - proj, axis=-1)
    return d.min(axis=1)


def task_success(pred: Array, episode: Episode, spec: SyntheticTaskSpec) -> bool:
    """True iff the endpoint reaches the instructed target and every waypoint
    stays inside the tube around either valid arc (multimodality accepted)."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != spec.chunk_shape:
        raise ValueError(f"chunk shape {pred.shape} != {spec.chunk_shape}")
    target = episode.obs.target()
    if np.linalg.norm(pred[-1] - target) > spec.endpoint_radius:
        return False
    d_best = np.full(spec.h, np.inf)
    for mode in (+1, -1):
        poly = arc_polyline(target, mode, spec)
        d_best = np.minimum(d_best, _dist_to_polyline(pred, poly))
    return bool(np.all(d_best <= spec.tube_radius))


def chunk_error(pred: Array, episode: Episode, spec: SyntheticTaskSpec) -> float:
    """RMS waypoint distance to the nearest of the two valid arcs' chunks."""
    pred = np.asarray(pred, dtype=np.float64)
    target = episode.obs.target()
    errs = []
    for mode in (+1, -1):
        ref = arc_chunk(target, mode, spec)
        errs.append(float(np.sqrt(np.mean((pred - ref) ** 2))))
    return min(errs)


def gen_dataset(spec: SyntheticTaskSpec, seed: int, n: int) -> list[Episode]:
    """n i.i.d. episodes; deterministic per (spec, seed)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    stream = rng_stream(seed)
    u = draw_uniform(stream, 5 * n).reshape(5, n)
    state = draw_normal(stream, 3 * n).reshape(n, 3) * spec.state_noise

    def polar(radius_range, u_r, u_a):
        lo, hi = radius_range
        r = lo + (hi - lo) * u_r
        a = 2.0 * np.pi * u_a
        return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)

    objects = polar(spec.object_radius, u[0], u[1])
    distractors = polar(spec.distractor_radius, u[2], u[3])
    instr = (draw_uniform(stream, n) < 0.5).astype(int)
    modes = np.where(draw_uniform(stream, n) < spec.arc_mode_p, 1, -1)

    episodes = []
    for i in range(n):
        obs = Observation(object_pos=objects[i], distractor_pos=distractors[i],
                          state=state[i], instruction=int(instr[i]))
        chunk = arc_chunk(obs.target(), int(modes[i]), spec)
        episodes.append(Episode(obs=obs, mode=int(modes[i]), chunk=chunk))
    return episodes


def oracle_mixture(obs: Observation, spec: SyntheticTaskSpec,
                   std: float) -> GaussianMixture:
    """The episode's true chunk distribution as an isotropic mixture over
    flattened chunks: one component per arc mode around the instructed
    target, weighted by the task's mode probability."""
    target = obs.target()
    means = np.stack([arc_chunk(target, +1, spec).reshape(-1),
                      arc_chunk(target, -1, spec).reshape(-1)])
    p = spec.arc_mode_p
    return GaussianMixture(weights=np.array([p, 1.0 - p]), means=means,
                           stds=np.array([std, std]))


def oracle_mixture_batch(observations, spec: SyntheticTaskSpec,
                         std: float) -> tuple[Array, Array, Array]:
    """Stacked (weights, means, stds) arrays for per-sample mixtures:
    shapes (B, 2), (B, 2, H*D), (B, 2)."""
    b = len(observations)
    hd = spec.h * spec.d
    weights = np.tile(np.array([spec.arc_mode_p, 1.0 - spec.arc_mode_p]),
                      (b, 1))
    means = np.empty((b, 2, hd))
    for i, obs in enumerate(observations):
        target = obs.target()
        means[i, 0] = arc_chunk(target, +1, spec).reshape(-1)
        means[i, 1] = arc_chunk(target, -1, spec).reshape(-1)
    stds = np.full((b, 2), std)
    return weights, means, stds
