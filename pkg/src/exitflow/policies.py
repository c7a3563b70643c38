"""Layered policies with per-layer action predictions.

Two implementations of the same tapped-policy contract:

* ToyPolicy — a trainable residual backbone over encoded observations with a
  shared MLP head (direct chunk regression) and/or a depth-matched
  flow-matching head (velocity field conditioned on the tap's hidden state).
* OracleLayeredPolicy — an analytic stand-in whose layer-i denoising field is
  the exact mixture field plus a geometrically decaying bounded perturbation,
  so layerwise prediction discrepancies have a known decay profile.

Both are consumed tap-by-tap through `tap_chain`, which the calibration
collector and the early-exit engines share so that offline statistics and
deployment see identical arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Protocol, runtime_checkable

import numpy as np

from .flow import (
    cfm_loss,
    conditional_path,
    euler_integrate,
    gm_marginal_field,
    gm_marginal_field_stacked,
    sample_tau,
    target_field,
)
from .nn import (
    DenseNet,
    OptState,
    RngStream,
    accumulate,
    dense_backward,
    dense_forward,
    derive_seed,
    draw_normal,
    draw_uniform,
    optimizer_step,
    rng_stream,
    zero_grads,
)
from .task import (
    ENC_DIM,
    STATE_SLICE,
    Observation,
    SyntheticTaskSpec,
    encode_obs,
    oracle_mixture,
    oracle_mixture_batch,
)

Array = np.ndarray


class TrainingError(RuntimeError):
    """Non-finite loss during a training step."""


@dataclass(frozen=True)
class HeadConfig:
    """Inference-time head protocol.

    kind: "mlp" (one regression per tap) or "fm" (n_steps Euler updates of
    the learned field per tap). warm_start only affects FM chains: taps
    after the first integrate from the previous tap's output instead of
    fresh noise.
    """

    kind: str
    n_steps: int = 10
    warm_start: bool = True

    def __post_init__(self):
        if self.kind not in ("mlp", "fm"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


@runtime_checkable
class LayerTappedPolicy(Protocol):
    """Anything that yields an action chunk at each eligible backbone layer."""

    @property
    def n_layers(self) -> int: ...

    @property
    def eligible_taps(self) -> tuple[int, ...]: ...

    @property
    def chunk_shape(self) -> tuple[int, int]: ...

    def supports(self, kind: str) -> bool: ...

    def predict_at_layer(self, obs: Observation, layer: int,
                         head_cfg: HeadConfig,
                         init: Array | None = None) -> Array: ...


def default_taps(n_layers: int, stride: int) -> tuple[int, ...]:
    if stride < 1 or stride > n_layers:
        raise ValueError("tap stride out of range")
    return tuple(range(stride, n_layers + 1, stride))


# ---------------------------------------------------------------------------
# Trainable toy policy
# ---------------------------------------------------------------------------


def time_embedding(tau: float, dim: int) -> Array:
    """Sinusoidal embedding of flow time on geometric frequencies 1..64."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(64.0), half))
    ang = tau * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


@dataclass
class ToyBackbone:
    """Input embedder followed by L width-preserving residual dense blocks."""

    embedder: DenseNet  # ENC_DIM -> W
    blocks: list[DenseNet]  # each W -> W, applied as h + block(h)

    def __post_init__(self):
        if len(self.blocks) < 2:
            raise ValueError("need at least 2 layers")
        w = self.width
        for l, b in enumerate(self.blocks):
            if b.widths[0] != w or b.widths[-1] != w:
                raise ValueError(f"block {l} does not preserve width {w}")

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    @property
    def width(self) -> int:
        return self.embedder.widths[-1]

    @classmethod
    def init(cls, n_layers: int, width: int, stream: RngStream,
             enc_dim: int = ENC_DIM) -> "ToyBackbone":
        embedder = DenseNet.init((enc_dim, width, width), stream)
        blocks = [DenseNet.init((width, width, width), stream, scale=0.5)
                  for _ in range(n_layers)]
        return cls(embedder, blocks)


def forward_to_layer(backbone: ToyBackbone, enc: Array,
                     i: int) -> tuple[list[Array], list]:
    """Hidden states h_0..h_i (h_0 = embedder output) plus forward caches.

    h_j never depends on blocks deeper than j, so truncating a full run and
    running directly to layer i give identical prefixes.
    """
    if not 1 <= i <= backbone.n_layers:
        raise ValueError(f"layer {i} outside 1..{backbone.n_layers}")
    h, ecache = dense_forward(backbone.embedder, enc)
    hs = [h]
    caches = [ecache]
    for j in range(i):
        delta, c = dense_forward(backbone.blocks[j], hs[-1])
        hs.append(hs[-1] + delta)
        caches.append(c)
    return hs, caches


@dataclass
class MlpHead:
    net: DenseNet  # W -> H*D
    chunk_shape: tuple[int, int]

    @classmethod
    def init(cls, width: int, chunk_shape: tuple[int, int],
             stream: RngStream) -> "MlpHead":
        h, d = chunk_shape
        net = DenseNet.init((width, 2 * width, h * d), stream)
        return cls(net, chunk_shape)


def mlp_predict(head: MlpHead, h: Array) -> Array:
    out, _ = dense_forward(head.net, h)
    return out.reshape(head.chunk_shape)


@dataclass
class FmHead:
    """Velocity-field head with one residual block per backbone layer.

    Each block consumes the concatenation (z, tap hidden state, current
    chunk, time embedding); tapping backbone layer i executes exactly
    min(i, L) blocks, so head depth tracks backbone depth.
    """

    embed: DenseNet  # (H*D + time_dim) -> Wh
    blocks: list[DenseNet]  # each (Wh + W + H*D + time_dim) -> Wh
    out: DenseNet  # Wh -> H*D
    chunk_shape: tuple[int, int]
    time_dim: int = 8

    @property
    def hidden_width(self) -> int:
        return self.embed.widths[-1]

    @classmethod
    def init(cls, n_layers: int, backbone_width: int,
             chunk_shape: tuple[int, int], stream: RngStream,
             hidden_width: int = 32, time_dim: int = 8) -> "FmHead":
        hd = chunk_shape[0] * chunk_shape[1]
        embed = DenseNet.init((hd + time_dim, hidden_width), stream)
        in_w = hidden_width + backbone_width + hd + time_dim
        blocks = [DenseNet.init((in_w, hidden_width, hidden_width), stream,
                                scale=0.5)
                  for _ in range(n_layers)]
        out = DenseNet.init((hidden_width, hidden_width, hd), stream)
        return cls(embed, blocks, out, chunk_shape, time_dim)


def fm_head_field(head: FmHead, h: Array, x_flat: Array, tau: float,
                  depth: int) -> Array:
    """One field evaluation v(x, tau | h) through the first `depth` blocks."""
    t_emb = time_embedding(tau, head.time_dim)
    z, _ = dense_forward(head.embed, np.concatenate([x_flat, t_emb]))
    for j in range(depth):
        u = np.concatenate([z, h, x_flat, t_emb])
        dz, _ = dense_forward(head.blocks[j], u)
        z = z + dz
    v, _ = dense_forward(head.out, z)
    return v


def fm_predict(head: FmHead, h: Array, depth: int, init: Array,
               n_steps: int) -> tuple[Array, int]:
    """Integrate the head's field from `init` over tau in [0, 1].

    Returns (chunk, total blocks executed) — the block count is
    depth * n_steps by construction and is exposed for instrumentation.
    """
    if init.shape != head.chunk_shape:
        raise ValueError("init shape does not match chunk shape")
    executed = 0

    def field(x: Array, tau: float) -> Array:
        nonlocal executed
        executed += depth
        return fm_head_field(head, h, x.reshape(-1), tau, depth).reshape(
            head.chunk_shape)

    chunk = euler_integrate(field, init, n_steps)
    return chunk, executed


@dataclass
class ToyPolicy:
    backbone: ToyBackbone
    mlp_head: MlpHead | None
    fm_head: FmHead | None
    tap_stride: int = 2

    @property
    def n_layers(self) -> int:
        return self.backbone.n_layers

    @property
    def eligible_taps(self) -> tuple[int, ...]:
        return default_taps(self.n_layers, self.tap_stride)

    @property
    def chunk_shape(self) -> tuple[int, int]:
        head = self.mlp_head or self.fm_head
        assert head is not None
        return head.chunk_shape

    def supports(self, kind: str) -> bool:
        return (self.mlp_head if kind == "mlp" else self.fm_head) is not None

    def _head_for(self, cfg: HeadConfig):
        head = self.mlp_head if cfg.kind == "mlp" else self.fm_head
        if head is None:
            raise ValueError(f"policy has no {cfg.kind!r} head")
        return head

    def predict_at_layer(self, obs: Observation, layer: int,
                         head_cfg: HeadConfig,
                         init: Array | None = None) -> Array:
        head = self._head_for(head_cfg)
        hs, _ = forward_to_layer(self.backbone, encode_obs(obs), layer)
        if head_cfg.kind == "mlp":
            return mlp_predict(head, hs[-1])
        if init is None:
            raise ValueError("fm prediction needs an init chunk")
        depth = min(layer, len(head.blocks))
        chunk, _ = fm_predict(head, hs[-1], depth, init, head_cfg.n_steps)
        return chunk

    @classmethod
    def init(cls, n_layers: int, width: int, chunk_shape: tuple[int, int],
             head_kinds: tuple[str, ...], seed: int,
             tap_stride: int = 2) -> "ToyPolicy":
        stream = rng_stream(derive_seed(seed, "init"))
        backbone = ToyBackbone.init(n_layers, width, stream)
        mlp = (MlpHead.init(width, chunk_shape, stream)
               if "mlp" in head_kinds else None)
        fm = (FmHead.init(n_layers, width, chunk_shape, stream)
              if "fm" in head_kinds else None)
        return cls(backbone, mlp, fm, tap_stride)


# ---------------------------------------------------------------------------
# Analytic layered oracle
# ---------------------------------------------------------------------------


@dataclass
class OracleLayeredPolicy:
    """Layered policy with a known, exactly computable refinement profile.

    The layer-i denoising field is the exact mixture marginal field plus
    zeta * gamma^i * sin(omega_i * x + phi_i), an elementwise bounded
    perturbation that decays geometrically with depth. With zeta = 0 every
    layer is exact, so all layerwise discrepancies vanish.

    The "mlp" protocol is a deterministic per-layer prediction: integrate
    the layer's field from the zero chunk with a fixed step count (no
    randomness, so repeated calls agree bitwise).
    """

    spec: SyntheticTaskSpec
    layers: int = 8
    tap_stride: int = 2
    gamma: float = 0.5
    zeta: float = 0.1
    seed: int = 0
    mixture_std: float = 0.05
    mlp_steps: int = 8
    _omega: dict = field(default_factory=dict, repr=False)
    _phi: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.zeta < 0.0:
            raise ValueError("zeta must be nonnegative")

    @property
    def n_layers(self) -> int:
        return self.layers

    @property
    def eligible_taps(self) -> tuple[int, ...]:
        return default_taps(self.layers, self.tap_stride)

    @property
    def chunk_shape(self) -> tuple[int, int]:
        return self.spec.chunk_shape

    def supports(self, kind: str) -> bool:
        return kind in ("mlp", "fm")

    def _perturb_params(self, layer: int) -> tuple[Array, Array]:
        if layer not in self._omega:
            f = self.spec.h * self.spec.d
            s = rng_stream(derive_seed(self.seed, "perturb", layer))
            self._omega[layer] = 0.5 + 3.0 * draw_uniform(s, f)
            self._phi[layer] = 2.0 * np.pi * draw_uniform(s, f)
        return self._omega[layer], self._phi[layer]

    def layer_field(self, obs: Observation, layer: int):
        """The (x, tau) -> velocity callable for a given layer; x may be a
        flat chunk (F,) or a batch (B, F)."""
        mix = oracle_mixture(obs, self.spec, self.mixture_std)
        omega, phi = self._perturb_params(layer)
        amp = self.zeta * self.gamma**layer

        def fieldfn(x: Array, tau: float) -> Array:
            base = gm_marginal_field(mix, x, tau)
            if amp == 0.0:
                return base
            return base + amp * np.sin(omega * x + phi)

        return fieldfn

    def predict_at_layer(self, obs: Observation, layer: int,
                         head_cfg: HeadConfig,
                         init: Array | None = None) -> Array:
        if not 1 <= layer <= self.layers:
            raise ValueError(f"layer {layer} outside 1..{self.layers}")
        fieldfn = self.layer_field(obs, layer)
        shape = self.chunk_shape
        if head_cfg.kind == "mlp":
            x = euler_integrate(fieldfn, np.zeros(shape[0] * shape[1]),
                                self.mlp_steps)
        else:
            if init is None:
                raise ValueError("fm prediction needs an init chunk")
            x = euler_integrate(fieldfn, init.reshape(-1), head_cfg.n_steps)
        return x.reshape(shape)

    # Batch path: same elementwise arithmetic row-for-row as the single-path
    # calls (no BLAS), so collectors may batch while deployment replays
    # per-episode bit-exactly.
    def predict_batch(self, observations, layer: int, head_cfg: HeadConfig,
                      inits: Array | None = None) -> Array:
        weights, means, stds = oracle_mixture_batch(observations, self.spec,
                                                    self.mixture_std)
        omega, phi = self._perturb_params(layer)
        amp = self.zeta * self.gamma**layer

        def fieldfn(x: Array, tau: float) -> Array:
            base = gm_marginal_field_stacked(weights, means, stds, x, tau)
            if amp == 0.0:
                return base
            return base + amp * np.sin(omega * x + phi)

        b = len(observations)
        f = self.spec.h * self.spec.d
        if head_cfg.kind == "mlp":
            x0 = np.zeros((b, f))
            n = self.mlp_steps
        else:
            if inits is None:
                raise ValueError("fm prediction needs init chunks")
            x0 = inits.reshape(b, f)
            n = head_cfg.n_steps
        out = euler_integrate(fieldfn, x0, n)
        return out.reshape(b, *self.chunk_shape)


def action_at_layer(policy: LayerTappedPolicy, obs: Observation, layer: int,
                    head_cfg: HeadConfig, init: Array | None = None) -> Array:
    """Predict at one eligible tap; rejects ineligible layers."""
    if layer not in policy.eligible_taps:
        raise ValueError(f"layer {layer} not in eligible taps "
                         f"{policy.eligible_taps}")
    return policy.predict_at_layer(obs, layer, head_cfg, init)


# ---------------------------------------------------------------------------
# Tap chains (the seam shared by calibration collection and deployment)
# ---------------------------------------------------------------------------


def _draw_chunk_noise(stream: RngStream, shape: tuple[int, int]) -> Array:
    return draw_normal(stream, shape[0] * shape[1]).reshape(shape)


def validate_taps(policy: LayerTappedPolicy, taps) -> tuple[int, ...]:
    taps = tuple(taps)
    if len(taps) < 1:
        raise ValueError("need at least one tap")
    if list(taps) != sorted(set(taps)):
        raise ValueError("taps must be strictly increasing")
    eligible = set(policy.eligible_taps)
    bad = [t for t in taps if t not in eligible]
    if bad:
        raise ValueError(f"taps {bad} not eligible for this policy "
                         f"(eligible: {policy.eligible_taps})")
    return taps


def tap_chain(policy: LayerTappedPolicy, obs: Observation,
              head_cfg: HeadConfig, stream: RngStream | None,
              taps=None) -> Iterator[tuple[int, Array]]:
    """Lazily yield (layer, chunk) at each tap, in depth order.

    `taps` defaults to every eligible tap; a schedule may restrict it to a
    subset (skipped taps get no prediction at all).

    FM protocol: the first tap integrates from noise drawn off `stream`;
    later taps start from the previous tap's output under warm start, else
    from fresh noise. Noise is drawn only when a tap actually integrates
    from noise, and only when that tap is reached — so an early-exiting
    consumer and a run-to-the-end consumer see identical draws over the
    visited prefix.

    MLP protocol consumes no randomness.
    """
    if not policy.supports(head_cfg.kind):
        raise ValueError(f"policy does not support {head_cfg.kind!r}")
    taps = (policy.eligible_taps if taps is None
            else validate_taps(policy, taps))
    prev: Array | None = None
    for layer in taps:
        if head_cfg.kind == "mlp":
            chunk = policy.predict_at_layer(obs, layer, head_cfg)
        else:
            if prev is None or not head_cfg.warm_start:
                if stream is None:
                    raise ValueError("fm chain needs an RngStream")
                init = _draw_chunk_noise(stream, policy.chunk_shape)
            else:
                init = prev
            chunk = policy.predict_at_layer(obs, layer, head_cfg, init)
        prev = chunk
        yield layer, chunk


def tap_chain_batch(policy: OracleLayeredPolicy, observations,
                    head_cfg: HeadConfig, streams,
                    taps=None) -> Iterator[tuple[int, Array]]:
    """Batched tap chain for policies with a bit-exact batch path.

    Per-episode noise comes from that episode's own stream with the same
    draw order as `tap_chain`, so row b of every yielded batch equals the
    single-episode chain for episode b bitwise.
    """
    if not policy.supports(head_cfg.kind):
        raise ValueError(f"policy does not support {head_cfg.kind!r}")
    taps = (policy.eligible_taps if taps is None
            else validate_taps(policy, taps))
    b = len(observations)
    shape = policy.chunk_shape
    prev: Array | None = None
    for layer in taps:
        if head_cfg.kind == "mlp":
            chunks = policy.predict_batch(observations, layer, head_cfg)
        else:
            if prev is None or not head_cfg.warm_start:
                inits = np.stack([_draw_chunk_noise(streams[i], shape)
                                  for i in range(b)])
            else:
                inits = prev
            chunks = policy.predict_batch(observations, layer, head_cfg,
                                          inits)
        prev = chunks
        yield layer, chunks


# ---------------------------------------------------------------------------
# Multi-exit training
# ---------------------------------------------------------------------------


def policy_params(policy: ToyPolicy, kind: str) -> dict[str, Array]:
    """Live parameter arrays (shared, not copied) for the optimizer."""
    params: dict[str, Array] = {}
    params.update(policy.backbone.embedder.named_params("emb."))
    for l, b in enumerate(policy.backbone.blocks):
        params.update(b.named_params(f"bb{l}."))
    if kind == "mlp":
        head = policy.mlp_head
        if head is None:
            raise ValueError("policy has no mlp head")
        params.update(head.net.named_params("mlp."))
    else:
        head = policy.fm_head
        if head is None:
            raise ValueError("policy has no fm head")
        params.update(head.embed.named_params("fm.embed."))
        for l, b in enumerate(head.blocks):
            params.update(b.named_params(f"fm.bk{l}."))
        params.update(head.out.named_params("fm.out."))
    return params


def _l1_loss(pred: Array, target: Array) -> tuple[float, Array]:
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _mlp_layer_loss(policy: ToyPolicy, hs, layer: int, targets_flat: Array,
                    grads: dict[str, Array], scale: float) -> tuple[float, Array]:
    """L1 chunk loss at one tap; returns (loss, dL/dh_layer * scale)."""
    head = policy.mlp_head
    assert head is not None
    out, hcache = dense_forward(head.net, hs[layer])
    loss, dout = _l1_loss(out, targets_flat)
    hgrads, dh = dense_backward(head.net, hcache, dout)
    accumulate(grads, hgrads.named("mlp."), scale)
    return loss, scale * dh


def _fm_layer_loss(policy: ToyPolicy, hs, layer: int,
                   x_flat: Array, t_embs: Array, targets_u: Array,
                   grads: dict[str, Array], scale: float) -> tuple[float, Array]:
    """CFM loss of one field evaluation at one tap (batched).

    x_flat (B, HD): noisy chunks; t_embs (B, TE): time embeddings;
    targets_u (B, HD): conditional velocity targets.
    """
    head = policy.fm_head
    assert head is not None
    h = hs[layer]  # (B, W)
    depth = min(layer, len(head.blocks))
    wh = head.hidden_width

    e_in = np.concatenate([x_flat, t_embs], axis=1)
    z, ecache = dense_forward(head.embed, e_in)
    zs = [z]
    bcaches = []
    for j in range(depth):
        u = np.concatenate([zs[-1], h, x_flat, t_embs], axis=1)
        dz, c = dense_forward(head.blocks[j], u)
        zs.append(zs[-1] + dz)
        bcaches.append(c)
    v, ocache = dense_forward(head.out, zs[-1])

    loss, dv = cfm_loss(v, targets_u)
    ograds, dz_acc = dense_backward(head.out, ocache, dv)
    accumulate(grads, ograds.named("fm.out."), scale)
    dh = np.zeros_like(h)
    w = h.shape[1]
    for j in range(depth - 1, -1, -1):
        bgrads, du = dense_backward(head.blocks[j], bcaches[j], dz_acc)
        accumulate(grads, bgrads.named(f"fm.bk{j}."), scale)
        dz_acc = dz_acc + du[:, :wh]
        dh += du[:, wh:wh + w]
    egrads, _ = dense_backward(head.embed, ecache, dz_acc)
    accumulate(grads, egrads.named("fm.embed."), scale)
    return loss, scale * dh


def batch_loss(policy: ToyPolicy, enc: Array, targets: Array, kind: str,
               layers, taus: Array | None = None,
               noise: Array | None = None) -> tuple[float, dict[str, Array]]:
    """Loss and parameter gradients for one batch at the given taps.

    Pure in its explicit inputs: the caller supplies the supervised layers
    and, for the FM head, the flow times and noise draws. The per-layer
    losses are averaged (equal weights), so supervising one uniformly
    sampled layer is an unbiased estimator of the all-layers loss.
    """
    layers = list(layers)
    if not layers:
        raise ValueError("need at least one supervised layer")
    b = enc.shape[0]
    targets_flat = targets.reshape(b, -1)
    params = policy_params(policy, kind)
    grads = zero_grads(params)
    deepest = max(layers)
    hs, caches = forward_to_layer(policy.backbone, enc, deepest)

    if kind == "fm":
        if taus is None or noise is None:
            raise ValueError("fm loss needs taus and noise")
        head = policy.fm_head
        assert head is not None
        x_flat = conditional_path(targets_flat, noise, taus)
        targets_u = target_field(targets_flat, noise)
        t_embs = np.stack([time_embedding(float(t), head.time_dim)
                           for t in taus])

    scale = 1.0 / len(layers)
    total = 0.0
    dh_at = {l: np.zeros_like(hs[0]) for l in range(deepest + 1)}
    for layer in layers:
        if kind == "mlp":
            loss, dh = _mlp_layer_loss(policy, hs, layer, targets_flat,
                                       grads, scale)
        else:
            loss, dh = _fm_layer_loss(policy, hs, layer, x_flat, t_embs,
                                      targets_u, grads, scale)
        total += scale * loss
        dh_at[layer] = dh_at[layer] + dh

    # backbone backward through the residual stack
    g = dh_at[deepest]
    for j in range(deepest, 0, -1):
        bgrads, dx = dense_backward(policy.backbone.blocks[j - 1], caches[j],
                                    g)
        accumulate(grads, bgrads.named(f"bb{j - 1}."))
        g = g + dx
        g = g + dh_at[j - 1]
    egrads, _ = dense_backward(policy.backbone.embedder, caches[0], g)
    accumulate(grads, egrads.named("emb."))
    return total, grads


def train_step(policy: ToyPolicy, episodes, kind: str, mode: str,
               opt: OptState, stream: RngStream,
               p_mask: float = 0.5) -> float:
    """One optimizer update on a batch of episodes.

    mode "random_exit": supervise one uniformly drawn eligible tap;
    mode "all_exits": average the loss over every eligible tap.
    With probability p_mask (per sample) the proprioceptive block of the
    encoded observation is zeroed before the forward pass.
    """
    if mode not in ("random_exit", "all_exits"):
        raise ValueError(f"unknown training mode {mode!r}")
    b = len(episodes)
    enc = np.stack([encode_obs(ep.obs) for ep in episodes])
    targets = np.stack([ep.chunk for ep in episodes])

    mask = draw_uniform(stream, b) < p_mask
    enc[mask, STATE_SLICE] = 0.0

    taps = policy.eligible_taps
    if mode == "random_exit":
        pick = int(draw_uniform(stream, 1)[0] * len(taps))
        layers = [taps[min(pick, len(taps) - 1)]]
    else:
        layers = list(taps)

    taus = noise = None
    if kind == "fm":
        hd = targets.shape[1] * targets.shape[2]
        taus = sample_tau(stream, b)
        noise = draw_normal(stream, b * hd).reshape(b, hd)

    loss, grads = batch_loss(policy, enc, targets.astype(np.float64), kind,
                             layers, taus, noise)
    if not np.isfinite(loss):
        raise TrainingError(
            f"non-finite loss (mode={mode}, kind={kind}, batch={b}, "
            f"layers={layers})")
    params = policy_params(policy, kind)
    optimizer_step(params, grads, opt)
    return loss
