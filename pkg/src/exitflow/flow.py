"""Flow-matching primitives.

The probability path interpolates noise (tau=0) toward data (tau=1):
x_tau = tau * a + (1 - tau) * eps, with regression target a - eps. For
isotropic Gaussian mixtures the marginal velocity field has a closed form
(posterior-weighted per-component conditional expectations), which gives an
exact oracle to integrate and to test learned fields against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import RngStream, draw_normal, draw_uniform

Array = np.ndarray

TAU_MAX = 1.0 - 1e-9


class IntegrationError(RuntimeError):
    """Non-finite state encountered during ODE integration."""

    def __init__(self, step: int, tau: float):
        self.step = step
        self.tau = tau
        super().__init__(f"non-finite state at step {step} (tau={tau:.6g})")


def conditional_path(a: Array, eps: Array, tau) -> Array:
    """Point on the straight path from noise to data: tau*a + (1-tau)*eps."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0.0) or np.any(tau > 1.0):
        raise ValueError("tau must lie in [0, 1]")
    t = tau if tau.ndim == 0 else tau[..., None]
    return t * a + (1.0 - t) * eps


def target_field(a: Array, eps: Array) -> Array:
    """Conditional velocity along the straight path (constant in tau)."""
    return np.asarray(a, dtype=np.float64) - np.asarray(eps, dtype=np.float64)


def sample_tau(stream: RngStream, n: int) -> Array:
    """Timesteps biased toward 1 (late times): tau = 1 - b, b ~ Beta(1.5, 1).

    Inverse-CDF sampling: b = u^(2/3). Clipped to [0, 0.999].
    """
    u = draw_uniform(stream, n)
    b = u ** (2.0 / 3.0)
    return np.clip(1.0 - b, 0.0, 0.999)


def cfm_loss(pred: Array, target: Array) -> tuple[float, Array]:
    """Mean squared error over all elements, and its gradient wrt pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad


def euler_integrate(field: Callable[[Array, float], Array], x0: Array,
                    n_steps: int) -> Array:
    """Forward Euler over tau in [0, 1]: x <- x + delta * field(x, k*delta).

    Raises IntegrationError if the state goes non-finite.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    delta = 1.0 / n_steps
    x = np.asarray(x0, dtype=np.float64).copy()
    for k in range(n_steps):
        x = x + delta * np.asarray(field(x, k * delta), dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(step=k, tau=k * delta)
    return x


# ---------------------------------------------------------------------------
# Isotropic Gaussian mixtures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of isotropic Gaussians in R^F.

    weights: (K,) nonnegative, summing to 1
    means:   (K, F)
    stds:    (K,) per-component isotropic standard deviation
    """

    weights: Array
    means: Array
    stds: Array

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        s = np.asarray(self.stds, dtype=np.float64)
        if m.ndim != 2 or w.shape != (m.shape[0],) or s.shape != (m.shape[0],):
            raise ValueError("inconsistent mixture shapes")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a probability vector")
        if np.any(s < 0):
            raise ValueError("stds must be nonnegative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> Array:
        return self.weights @ self.means


def gm_sample(mix: GaussianMixture, stream: RngStream, n: int) -> Array:
    """Draw n points; component choice by inverse CDF on one uniform each."""
    u = draw_uniform(stream, n)
    cum = np.cumsum(mix.weights)
    idx = np.searchsorted(cum, u, side="right")
    idx = np.minimum(idx, mix.n_components - 1)
    z = draw_normal(stream, n * mix.dim).reshape(n, mix.dim)
    return mix.means[idx] + mix.stds[idx][:, None] * z


def gm_marginal_field(mix: GaussianMixture, x: Array, tau: float) -> Array:
    """Exact marginal velocity field of the straight noise-to-data path.

    With x1 ~ component j (N(mu_j, s_j^2 I)) and x0 ~ N(0, I), the marginal
    of x_tau under component j is N(tau*mu_j, sigma_j^2 I) with
    sigma_j^2 = tau^2 s_j^2 + (1-tau)^2, and

        E[x1 - x0 | x_tau = x, j]
            = mu_j + (tau*s_j^2 - (1-tau)) / sigma_j^2 * (x - tau*mu_j).

    The field is the responsibility-weighted sum over components, with
    responsibilities r_j(x) proportional to w_j * N(x; tau*mu_j, sigma_j^2 I).
    Accepts x of shape (F,) or (B, F).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    tau = min(float(tau), TAU_MAX)
    if tau < 0.0:
        raise ValueError("tau must be nonnegative")

    s2 = mix.stds**2  # (K,)
    sigma2 = tau * tau * s2 + (1.0 - tau) ** 2  # (K,)
    centered = xb[:, None, :] - tau * mix.means[None, :, :]  # (B, K, F)
    sqdist = np.sum(centered * centered, axis=-1)  # (B, K)
    f = mix.dim
    log_r = (np.log(np.maximum(mix.weights, 1e-300))[None, :]
             - 0.5 * f * np.log(2.0 * np.pi * sigma2)[None, :]
             - 0.5 * sqdist / sigma2[None, :])
    log_r -= log_r.max(axis=1, keepdims=True)
    r = np.exp(log_r)
    r /= r.sum(axis=1, keepdims=True)

    coef = (tau * s2 - (1.0 - tau)) / sigma2  # (K,)
    cond = mix.means[None, :, :] + coef[None, :, None] * centered  # (B, K, F)
    out = np.sum(r[:, :, None] * cond, axis=1)
    return out[0] if single else out


def gm_field_fn(mix: GaussianMixture) -> Callable[[Array, float], Array]:
    """The mixture's marginal field as an integrable (x, tau) callable."""

    def field(x: Array, tau: float) -> Array:
        return gm_marginal_field(mix, x, tau)

    return field


def gm_marginal_field_stacked(weights: Array, means: Array, stds: Array,
                              x: Array, tau: float) -> Array:
    """gm_marginal_field for a different mixture per row.

    weights (B, K), means (B, K, F), stds (B, K), x (B, F) -> (B, F).
    Uses only elementwise ops and fixed-axis reductions, so row b is
    bitwise-identical to the single-mixture call with that row's mixture
    (no BLAS whose summation order depends on batch shape).
    """
    x = np.asarray(x, dtype=np.float64)
    tau = min(float(tau), TAU_MAX)
    if tau < 0.0:
        raise ValueError("tau must be nonnegative")
    f = means.shape[-1]
    s2 = stds**2  # (B, K)
    sigma2 = tau * tau * s2 + (1.0 - tau) ** 2
    centered = x[:, None, :] - tau * means  # (B, K, F)
    sqdist = np.sum(centered * centered, axis=-1)  # (B, K)
    log_r = (np.log(np.maximum(weights, 1e-300))
             - 0.5 * f * np.log(2.0 * np.pi * sigma2)
             - 0.5 * sqdist / sigma2)
    log_r -= log_r.max(axis=1, keepdims=True)
    r = np.exp(log_r)
    r /= r.sum(axis=1, keepdims=True)
    coef = (tau * s2 - (1.0 - tau)) / sigma2  # (B, K)
    cond = means + coef[:, :, None] * centered
    return np.sum(r[:, :, None] * cond, axis=1)
