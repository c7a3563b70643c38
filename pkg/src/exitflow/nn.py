"""Minimal dense-network numerics: parameter storage, forward/backward,
AdamW with warmup+cosine schedule, and a counter-based deterministic RNG.

Everything is float64 and pure numpy. Networks are small (width <= 256,
depth <= 8 per block), so clarity wins over cleverness throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from numpy.random import Philox

Array = np.ndarray

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


class NonFiniteGradientError(RuntimeError):
    """Raised when an optimizer step receives a NaN/inf gradient."""


# ---------------------------------------------------------------------------
# Deterministic randomness
# ---------------------------------------------------------------------------


@dataclass
class RngStream:
    """Counter-based random stream: (seed, counter) fully determines output.

    Uniforms are derived from raw Philox 64-bit words as (word >> 11) * 2^-53,
    normals via Box-Muller on open-interval uniforms. The counter tracks raw
    words consumed, so a stream can be reconstructed exactly from
    (seed, counter) alone.
    """

    seed: int
    counter: int = 0
    _bitgen: Philox = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._bitgen = Philox(key=self.seed)
        if self.counter:
            self._bitgen.random_raw(self.counter)  # skip consumed words

    def raw_words(self, n: int) -> Array:
        words = self._bitgen.random_raw(n)
        self.counter += n
        return np.atleast_1d(words).astype(np.uint64)


def rng_stream(seed: int, counter: int = 0) -> RngStream:
    if seed < 0 or counter < 0:
        raise ValueError("seed and counter must be non-negative")
    return RngStream(seed=seed, counter=counter)


def draw_uniform(stream: RngStream, n: int) -> Array:
    """n uniforms in [0, 1), one Philox word each."""
    words = stream.raw_words(n)
    return (words >> np.uint64(11)) * 2.0**-53


def draw_uniform_open(stream: RngStream, n: int) -> Array:
    """n uniforms in (0, 1], safe as log/power arguments."""
    words = stream.raw_words(n)
    return ((words >> np.uint64(11)) + np.uint64(1)) * 2.0**-53


def draw_normal(stream: RngStream, n: int) -> Array:
    """n standard normals via Box-Muller (consumes 2*ceil(n/2) words)."""
    pairs = (n + 1) // 2
    u1 = draw_uniform_open(stream, pairs)
    u2 = draw_uniform(stream, pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * math.pi * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
    return z[:n]


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings (for sub-streams)."""
    import hashlib

    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little") >> 1


# ---------------------------------------------------------------------------
# Dense networks
# ---------------------------------------------------------------------------


def _act(name: str, z: Array) -> Array:
    if name == "tanh":
        return np.tanh(z)
    if name == "gelu":
        # tanh approximation of GELU
        inner = _SQRT_2_OVER_PI * (z + _GELU_CUBIC * z**3)
        return 0.5 * z * (1.0 + np.tanh(inner))
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: Array) -> Array:
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "gelu":
        inner = _SQRT_2_OVER_PI * (z + _GELU_CUBIC * z**3)
        t = np.tanh(inner)
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * z * z)
        return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner
    if name == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class DenseNet:
    """Fully-connected net; hidden layers use `activation`, the final layer
    is always identity (affine output)."""

    widths: tuple[int, ...]
    weights: list[Array]  # weights[l] has shape (widths[l], widths[l+1])
    biases: list[Array]  # biases[l] has shape (widths[l+1],)
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("need at least input and output widths")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[l], self.widths[l + 1]):
                raise ValueError(f"layer {l}: weight shape {w.shape} inconsistent")
            if b.shape != (self.widths[l + 1],):
                raise ValueError(f"layer {l}: bias shape {b.shape} inconsistent")

    @classmethod
    def init(cls, widths, stream: RngStream, activation: str = "tanh",
             scale: float = 1.0) -> "DenseNet":
        """Gaussian fan-in init, zero biases."""
        weights, biases = [], []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            w = draw_normal(stream, w_in * w_out).reshape(w_in, w_out)
            weights.append(w * (scale / math.sqrt(w_in)))
            biases.append(np.zeros(w_out))
        return cls(tuple(widths), weights, biases, activation)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Array]]:
        for l in range(self.n_layers):
            yield f"{prefix}W{l}", self.weights[l]
            yield f"{prefix}b{l}", self.biases[l]


@dataclass
class ForwardCache:
    """Pre/post-activations saved by dense_forward for the backward pass."""

    x: Array
    pre: list[Array]
    post: list[Array]
    net_id: int


def dense_forward(net: DenseNet, x: Array) -> tuple[Array, ForwardCache]:
    """Forward pass; x is (d,) or (n, d). Returns output and cache."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.widths[0]:
        raise ValueError(
            f"input width {x.shape[-1]} != first layer width {net.widths[0]}")
    pre, post = [], []
    a = x
    last = net.n_layers - 1
    for l in range(net.n_layers):
        z = a @ net.weights[l] + net.biases[l]
        pre.append(z)
        a = z if l == last else _act(net.activation, z)
        post.append(a)
    return a, ForwardCache(x=x, pre=pre, post=post, net_id=id(net))


@dataclass
class DenseGrads:
    weights: list[Array]
    biases: list[Array]

    def named(self, prefix: str = "") -> Iterator[tuple[str, Array]]:
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}W{l}", w
            yield f"{prefix}b{l}", b


def dense_backward(net: DenseNet, cache: ForwardCache,
                   upstream: Array) -> tuple[DenseGrads, Array]:
    """Backprop `upstream` = dL/dy through the net; returns parameter grads
    and dL/dx. Cache must come from a dense_forward call on the same net."""
    if cache.net_id != id(net):
        raise ValueError("cache does not belong to this net")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.post[-1].shape:
        raise ValueError("upstream shape does not match forward output")
    dws: list[Array] = [None] * net.n_layers  # type: ignore[list-item]
    dbs: list[Array] = [None] * net.n_layers  # type: ignore[list-item]
    last = net.n_layers - 1
    for l in range(last, -1, -1):
        if l != last:
            g = g * _act_grad(net.activation, cache.pre[l])
        a_in = cache.x if l == 0 else cache.post[l - 1]
        if a_in.ndim == 1:
            dws[l] = np.outer(a_in, g)
            dbs[l] = g.copy()
        else:
            dws[l] = a_in.T @ g
            dbs[l] = g.sum(axis=0)
        g = g @ net.weights[l].T
    return DenseGrads(dws, dbs), g


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def rel_error(analytic: float, numeric: float, scale: float = 0.0) -> float:
    """Relative error with a floor tied to the surrounding gradient scale.

    Entries much smaller than their tensor's largest gradient carry only
    finite-difference noise; the floor keeps them from dominating while a
    genuinely wrong gradient (sign flip, missing term) still scores O(1).
    """
    return (abs(analytic - numeric)
            / (abs(analytic) + abs(numeric) + 1e-4 * scale + 1e-12))


def grad_check(net: DenseNet, x: Array,
               loss_fn: Callable[[Array], tuple[float, Array]],
               h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients
    of loss_fn(dense_forward(net, x)) over all parameters.

    loss_fn maps the network output y to (scalar loss, dL/dy).
    """
    y, cache = dense_forward(net, x)
    _, dy = loss_fn(y)
    grads, _ = dense_backward(net, cache, dy)
    params = list(net.named_params())
    analytic = dict(grads.named())
    worst = 0.0
    for name, arr in params:
        g = analytic[name]
        scale = float(np.abs(g).max())
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            lp, _ = loss_fn(dense_forward(net, x)[0])
            arr[idx] = orig - h
            lm, _ = loss_fn(dense_forward(net, x)[0])
            arr[idx] = orig
            num = (lp - lm) / (2.0 * h)
            worst = max(worst, rel_error(float(g[idx]), num, scale))
            it.iternext()
    return worst


def grad_check_params(params: dict[str, Array],
                      loss_fn: Callable[[], float],
                      analytic: dict[str, Array],
                      h: float = 1e-5) -> float:
    """Central-difference check for an arbitrary parameterized scalar loss.

    `loss_fn` recomputes the loss from the live parameter arrays; `analytic`
    maps the same names to gradient arrays.
    """
    worst = 0.0
    for name, arr in params.items():
        g = analytic[name]
        scale = float(np.abs(g).max())
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            lp = loss_fn()
            arr[idx] = orig - h
            lm = loss_fn()
            arr[idx] = orig
            num = (lp - lm) / (2.0 * h)
            worst = max(worst, rel_error(float(g[idx]), num, scale))
            it.iternext()
    return worst


# ---------------------------------------------------------------------------
# Optimizer: AdamW with linear warmup then cosine decay to zero
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_steps: int
    total_steps: int

    def at(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        if step >= self.total_steps:
            return 0.0
        span = max(self.total_steps - self.warmup_steps, 1)
        progress = (step - self.warmup_steps) / span
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptState:
    """AdamW accumulators; `step` counts completed updates."""

    m: dict[str, Array]
    v: dict[str, Array]
    step: int
    schedule: LrSchedule
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01


def optimizer_init(params: dict[str, Array], schedule: LrSchedule,
                   beta1: float = 0.9, beta2: float = 0.95,
                   eps: float = 1e-8, weight_decay: float = 0.01) -> OptState:
    return OptState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        step=0,
        schedule=schedule,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
    )


def optimizer_step(params: dict[str, Array], grads: dict[str, Array],
                   state: OptState) -> float:
    """In-place AdamW update with bias correction. Returns the effective
    learning rate used. Rejects non-finite gradients."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name!r}")
    lr = state.schedule.at(state.step)
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p -= lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                   + state.weight_decay * p)
    state.step = t
    return lr


def zero_grads(params: dict[str, Array]) -> dict[str, Array]:
    return {k: np.zeros_like(p) for k, p in params.items()}


def accumulate(total: dict[str, Array], part: Iterator[tuple[str, Array]],
               scale: float = 1.0) -> None:
    for name, g in part:
        total[name] += scale * g
