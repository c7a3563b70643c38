"""Exit-threshold calibration.

Collect a matrix V of between-tap prediction discrepancies over a held-out
set, pick a target exit distribution p over the exit-capable taps, then set
each tap's threshold to a quantile of the discrepancies among samples not
yet captured by an earlier exit (filtered quantiles). Samples exit at the
first tap whose discrepancy is at or below its threshold; the final
threshold is +inf so every sample exits somewhere.

Tap layout: the first visited tap is a baseline — it produces the first
prediction for the consistency test but can never exit (a comparison-based
criterion is undefined there). The K taps after it are exit-capable; V has
one row per exit-capable tap and row k compares tap k's chunk with the
previous tap's.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import RngStream, derive_seed, rng_stream
from .policies import (
    HeadConfig,
    LayerTappedPolicy,
    tap_chain,
    tap_chain_batch,
    validate_taps,
)

Array = np.ndarray

METRICS = ("l2", "mean_abs_dev", "cosine_distance")


class CollectionError(RuntimeError):
    """Prediction failure during discrepancy collection, with location."""


def discrepancy_batch(a: Array, b: Array, metric: str) -> Array:
    """Rowwise discrepancy between chunk batches of shape (B, H, D)."""
    if a.shape != b.shape:
        raise ValueError("chunk shape mismatch")
    af = a.reshape(a.shape[0], -1)
    bf = b.reshape(b.shape[0], -1)
    diff = af - bf
    if metric == "l2":
        return np.sqrt(np.sum(diff * diff, axis=1))
    if metric == "mean_abs_dev":
        return np.mean(np.abs(diff), axis=1)
    if metric == "cosine_distance":
        na = np.sqrt(np.sum(af * af, axis=1))
        nb = np.sqrt(np.sum(bf * bf, axis=1))
        denom = na * nb
        cos = np.where(denom > 0.0,
                       np.sum(af * bf, axis=1) / np.where(denom > 0, denom, 1.0),
                       1.0)  # zero-norm chunks count as identical
        return np.maximum(1.0 - cos, 0.0)
    raise ValueError(f"unknown metric {metric!r}")


def discrepancy(a: Array, b: Array, metric: str) -> float:
    """Discrepancy between two chunks; defined via the batch kernel so the
    batched collector and single-episode replay agree bitwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(discrepancy_batch(a[None], b[None], metric)[0])


@dataclass(frozen=True)
class DiscrepancyMatrix:
    """values[k, n]: discrepancy of sample n between exit-capable tap k and
    the tap before it."""

    values: Array  # (K, N)
    exit_layers: tuple[int, ...]  # length K
    baseline_layer: int
    metric: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != len(self.exit_layers):
            raise ValueError("values shape inconsistent with exit layers")
        if not np.all(np.isfinite(v)) or np.any(v < 0.0):
            raise ValueError("discrepancies must be finite and non-negative")
        if list(self.exit_layers) != sorted(set(self.exit_layers)):
            raise ValueError("exit layers must be strictly increasing")
        if self.exit_layers and self.baseline_layer >= self.exit_layers[0]:
            raise ValueError("baseline layer must precede the exit layers")
        object.__setattr__(self, "values", v)

    @property
    def n_exits(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]


def episode_stream(base_seed: int, index: int) -> RngStream:
    """The per-episode noise stream; collection and deployment both key
    episode i of a dataset to this stream so FM chains replay exactly."""
    return rng_stream(derive_seed(base_seed, "episode", index))


def collect_discrepancies(policy: LayerTappedPolicy, episodes, metric: str,
                          head_cfg: HeadConfig, base_seed: int,
                          taps=None, batch_size: int = 4096) -> DiscrepancyMatrix:
    """Run every episode through the full tap chain and record between-tap
    discrepancies. Uses the policy's bit-exact batch path when it has one;
    either way entry (k, n) equals what a per-episode deployment chain
    would measure at that tap.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    episodes = list(episodes)
    if not episodes:
        raise ValueError("empty calibration set")
    taps = validate_taps(policy, taps if taps is not None
                         else policy.eligible_taps)
    if len(taps) < 2:
        raise ValueError("need a baseline tap plus at least one exit tap")
    n = len(episodes)
    k_exits = len(taps) - 1
    v = np.empty((k_exits, n))

    if hasattr(policy, "predict_batch"):
        for start in range(0, n, batch_size):
            chunk_eps = episodes[start:start + batch_size]
            obs = [e.obs for e in chunk_eps]
            streams = [episode_stream(base_seed, start + i)
                       for i in range(len(chunk_eps))]
            prev = None
            row = 0
            try:
                for _layer, chunks in tap_chain_batch(policy, obs, head_cfg,
                                                      streams, taps):
                    if prev is not None:
                        v[row, start:start + len(chunk_eps)] = \
                            discrepancy_batch(chunks, prev, metric)
                        row += 1
                    prev = chunks
            except Exception as exc:
                raise CollectionError(
                    f"batch starting at sample {start}, tap row {row}: {exc}"
                ) from exc
    else:
        for i, ep in enumerate(episodes):
            stream = episode_stream(base_seed, i)
            prev = None
            row = 0
            try:
                for _layer, chunk in tap_chain(policy, ep.obs, head_cfg,
                                               stream, taps):
                    if prev is not None:
                        v[row, i] = discrepancy(chunk, prev, metric)
                        row += 1
                    prev = chunk
            except Exception as exc:
                raise CollectionError(
                    f"sample {i}, tap row {row}: {exc}") from exc
    return DiscrepancyMatrix(values=v, exit_layers=taps[1:],
                             baseline_layer=taps[0], metric=metric)


# ---------------------------------------------------------------------------
# Exit distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExitDistribution:
    kind: str  # exponential | gaussian | gamma
    criterion: float  # ratio c, gaussian center, or gamma shape
    extra: float  # gaussian sigma or gamma scale (unused for exponential)
    probs: tuple[float, ...]

    @property
    def n_exits(self) -> int:
        return len(self.probs)


def exit_distribution(kind: str, c: float, k: int, sigma: float = 1.0,
                      scale: float = 1.0) -> ExitDistribution:
    """Target exit probabilities over exit-capable taps 1..K.

    exponential: p_k proportional to c^k (c = 1 is uniform; c < 1 favors
    early exits). gaussian: p_k proportional to exp(-(k-c)^2 / (2 sigma^2)).
    gamma: p_k proportional to the Gamma(shape=c, scale) density at k.
    """
    if k < 1:
        raise ValueError("need at least one exit")
    if c <= 0.0:
        raise ValueError("criterion must be positive")
    ks = np.arange(1, k + 1, dtype=np.float64)
    if kind == "exponential":
        raw = c**ks
        extra = 0.0
    elif kind == "gaussian":
        if sigma <= 0.0:
            raise ValueError("sigma must be positive")
        raw = np.exp(-((ks - c) ** 2) / (2.0 * sigma * sigma))
        extra = sigma
    elif kind == "gamma":
        if scale <= 0.0:
            raise ValueError("scale must be positive")
        raw = (ks ** (c - 1.0) * np.exp(-ks / scale)
               / (math.gamma(c) * scale**c))
        extra = scale
    else:
        raise ValueError(f"unknown distribution kind {kind!r}")
    probs = raw / raw.sum()
    return ExitDistribution(kind=kind, criterion=c, extra=extra,
                            probs=tuple(float(p) for p in probs))


# ---------------------------------------------------------------------------
# Filtered-quantile calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExitSchedule:
    baseline_layer: int
    exit_layers: tuple[int, ...]
    thresholds: tuple[float, ...]  # one per exit layer; last is +inf
    metric: str
    mode: str  # literal | renormalized
    exhausted: bool = False  # calibration ran out of samples early

    def __post_init__(self):
        if len(self.exit_layers) != len(self.thresholds):
            raise ValueError("one threshold per exit layer")
        if not self.thresholds or self.thresholds[-1] != math.inf:
            raise ValueError("final threshold must be the +inf fallback")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")

    @property
    def taps(self) -> tuple[int, ...]:
        return (self.baseline_layer, *self.exit_layers)


def nearest_rank_quantile(values: Array, q: float) -> float:
    """Value at 1-based index ceil(q * n) of the ascending sort.

    Level 0 maps to -inf (a threshold nothing falls at or below).
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError("quantile level outside [0, 1]")
    if q == 0.0:
        return -math.inf
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("quantile of empty set")
    rank = min(math.ceil(q * values.size), values.size)
    return float(np.sort(values, kind="stable")[rank - 1])


def calibrate_thresholds(v: DiscrepancyMatrix, p: ExitDistribution,
                         mode: str = "renormalized") -> ExitSchedule:
    """Sequential filtered-quantile thresholds for the exit-capable taps.

    At tap k (over samples I not yet assigned): literal mode uses quantile
    level p_k as stated; renormalized mode uses p_k / (1 - sum_{j<k} p_j) so
    realized overall exit fractions track p. Then I keeps only samples whose
    row-k discrepancy exceeds the threshold. The last tap's threshold is
    +inf. If I empties early, later taps get -inf (they can see no samples)
    and the schedule is flagged exhausted.
    """
    if mode not in ("literal", "renormalized"):
        raise ValueError(f"unknown quantile mode {mode!r}")
    if p.n_exits != v.n_exits:
        raise ValueError(f"distribution has {p.n_exits} exits, matrix has "
                         f"{v.n_exits}")
    k_exits = v.n_exits
    remaining = np.arange(v.n_samples)
    thresholds = []
    assigned_mass = 0.0
    exhausted = False
    for k in range(k_exits - 1):
        if remaining.size == 0:
            exhausted = True
            thresholds.extend([-math.inf] * (k_exits - 1 - k))
            break
        if mode == "literal":
            level = p.probs[k]
        else:
            tail = 1.0 - assigned_mass
            level = 1.0 if tail <= 1e-12 else p.probs[k] / tail
        level = min(max(level, 0.0), 1.0)
        eta = nearest_rank_quantile(v.values[k, remaining], level)
        thresholds.append(eta)
        remaining = remaining[v.values[k, remaining] > eta]
        assigned_mass += p.probs[k]
    thresholds.append(math.inf)
    return ExitSchedule(baseline_layer=v.baseline_layer,
                        exit_layers=v.exit_layers,
                        thresholds=tuple(thresholds), metric=v.metric,
                        mode=mode, exhausted=exhausted)


def calibration_partition(v: DiscrepancyMatrix,
                          schedule: ExitSchedule) -> Array:
    """Exit index (0-based into exit_layers) each calibration sample takes
    under the schedule's first-tap-at-or-below rule."""
    if schedule.exit_layers != v.exit_layers:
        raise ValueError("schedule and matrix disagree on exit layers")
    n = v.n_samples
    out = np.full(n, v.n_exits - 1, dtype=int)
    undecided = np.ones(n, dtype=bool)
    for k, eta in enumerate(schedule.thresholds):
        hit = undecided & (v.values[k] <= eta)
        out[hit] = k
        undecided &= ~hit
    return out


def exit_fractions(partition: Array, k_exits: int) -> Array:
    counts = np.bincount(partition, minlength=k_exits)
    return counts / partition.size
