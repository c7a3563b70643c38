"""Early-exit inference engines and GFLOPs accounting.

Both heads share the exit discipline: walk the schedule taps in depth
order, compare each new chunk against the previous tap's chunk, and stop
at the first tap whose discrepancy falls at or below its threshold. The
baseline (first) tap only seeds the comparison; the final threshold is
+inf so the walk always terminates.

Costs are modeled, not measured: every engine returns an InferenceTrace
whose counts fully determine the accounted GFLOPs under a CostModel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .calibrate import ExitDistribution, ExitSchedule, discrepancy
from .nn import RngStream
from .policies import HeadConfig, LayerTappedPolicy, tap_chain
from .task import Observation

Array = np.ndarray

# Per-component costs in GFLOPs for a 28-layer vision-language backbone
# with a small action head; measured figures for the reference stack.
VISION_GFLOPS = 2013.36
PER_LAYER_GFLOPS = 323.61
MLP_HEAD_GFLOPS = 1.850
FM_STEP_GFLOPS = 0.493


@dataclass(frozen=True)
class CostModel:
    """Additive GFLOPs model: fixed front-end, per-layer backbone cost,
    per-evaluation head costs, and an optional per-comparison charge.

    `head_overhead` is a fixed per-inference surcharge (e.g. prompt/prefix
    processing inside the head) left at 0 by default because no component
    breakdown pins it down.
    """

    vision: float = VISION_GFLOPS
    per_layer: float = PER_LAYER_GFLOPS
    mlp_head: float = MLP_HEAD_GFLOPS
    fm_step: float = FM_STEP_GFLOPS
    comparison: float = 0.0
    head_overhead: float = 0.0

    def __post_init__(self):
        for name in ("vision", "per_layer", "mlp_head", "fm_step",
                     "comparison", "head_overhead"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} cost must be non-negative")


@dataclass(frozen=True)
class InferenceTrace:
    """Everything observable about one inference: where it exited, what it
    cost, and the per-tap discrepancies that drove the decision."""

    exit_layer: int
    taps_visited: int
    layers_run: int
    head_evals: int
    denoise_steps: int
    comparisons: int
    gflops: float
    chunk: Array
    discrepancies: tuple[float, ...] = field(default_factory=tuple)

    def record(self) -> dict:
        """Plain-type dict for line-delimited export."""
        return {
            "exit_layer": self.exit_layer,
            "taps_visited": self.taps_visited,
            "layers_run": self.layers_run,
            "head_evals": self.head_evals,
            "denoise_steps": self.denoise_steps,
            "comparisons": self.comparisons,
            "gflops": self.gflops,
            "discrepancies": list(self.discrepancies),
            "chunk": self.chunk.tolist(),
        }


def account_cost(trace: InferenceTrace, cost_model: CostModel) -> float:
    """Recompute accounted GFLOPs from the trace counts alone."""
    return (cost_model.vision
            + trace.layers_run * cost_model.per_layer
            + trace.head_evals * cost_model.mlp_head
            + trace.denoise_steps * cost_model.fm_step
            + trace.comparisons * cost_model.comparison
            + cost_model.head_overhead)


def _cost_from_counts(cost_model: CostModel, layers_run: int,
                      head_evals: int, denoise_steps: int,
                      comparisons: int) -> float:
    return (cost_model.vision
            + layers_run * cost_model.per_layer
            + head_evals * cost_model.mlp_head
            + denoise_steps * cost_model.fm_step
            + comparisons * cost_model.comparison
            + cost_model.head_overhead)


def infer_full(policy: LayerTappedPolicy, obs: Observation,
               head_cfg: HeadConfig, cost_model: CostModel | None = None,
               stream: RngStream | None = None) -> InferenceTrace:
    """Full-depth inference: run every backbone layer, evaluate the head
    once at the deepest tap (one MLP eval, or one n_steps integration from
    noise for the flow head)."""
    cost_model = cost_model or CostModel()
    layer = policy.eligible_taps[-1]
    if head_cfg.kind == "mlp":
        chunk = policy.predict_at_layer(obs, layer, head_cfg)
        head_evals, steps = 1, 0
    else:
        if stream is None:
            raise ValueError("fm inference needs an RngStream")
        from .policies import _draw_chunk_noise

        init = _draw_chunk_noise(stream, policy.chunk_shape)
        chunk = policy.predict_at_layer(obs, layer, head_cfg, init=init)
        head_evals, steps = 0, head_cfg.n_steps
    layers_run = policy.n_layers
    gflops = _cost_from_counts(cost_model, layers_run, head_evals, steps, 0)
    return InferenceTrace(exit_layer=layer, taps_visited=1,
                          layers_run=layers_run, head_evals=head_evals,
                          denoise_steps=steps, comparisons=0, gflops=gflops,
                          chunk=chunk)


def _walk_exits(policy, obs, schedule: ExitSchedule, head_cfg: HeadConfig,
                stream: RngStream | None):
    """Consume the tap chain until the exit rule fires.

    Returns (exit_layer, chunk, taps_visited, per-tap discrepancies). The
    chain is a lazy generator, so taps after the exit are never computed
    and draw no noise.
    """
    prev: Array | None = None
    discs: list[float] = []
    taps_visited = 0
    for layer, chunk in tap_chain(policy, obs, head_cfg, stream,
                                  taps=schedule.taps):
        taps_visited += 1
        if prev is None:
            prev = chunk
            continue
        d = discrepancy(chunk, prev, schedule.metric)
        discs.append(d)
        prev = chunk
        if d <= schedule.thresholds[taps_visited - 2]:
            return layer, chunk, taps_visited, tuple(discs)
    raise AssertionError("schedule fallback threshold failed to fire")


def infer_mlp_early_exit(policy: LayerTappedPolicy, obs: Observation,
                         schedule: ExitSchedule,
                         cost_model: CostModel | None = None
                         ) -> InferenceTrace:
    """Early-exit inference with the regression head: one head evaluation
    per visited tap, exit at the first sufficiently-consistent pair."""
    cost_model = cost_model or CostModel()
    layer, chunk, visited, discs = _walk_exits(
        policy, obs, schedule, HeadConfig(kind="mlp"), None)
    gflops = _cost_from_counts(cost_model, layers_run=layer,
                               head_evals=visited, denoise_steps=0,
                               comparisons=visited - 1)
    return InferenceTrace(exit_layer=layer, taps_visited=visited,
                          layers_run=layer, head_evals=visited,
                          denoise_steps=0, comparisons=visited - 1,
                          gflops=gflops, chunk=chunk, discrepancies=discs)


def infer_fm_early_exit(policy: LayerTappedPolicy, obs: Observation,
                        schedule: ExitSchedule, n_steps_per_layer: int,
                        warm_start: bool, stream: RngStream,
                        cost_model: CostModel | None = None
                        ) -> InferenceTrace:
    """Early-exit inference with the flow head.

    Every visited tap re-integrates flow time 0 -> 1 in n_steps_per_layer
    Euler steps under that tap's field. Under warm start the integration
    begins from the previous tap's output; otherwise each tap draws fresh
    noise from `stream`.
    """
    cost_model = cost_model or CostModel()
    cfg = HeadConfig(kind="fm", n_steps=n_steps_per_layer,
                     warm_start=warm_start)
    layer, chunk, visited, discs = _walk_exits(policy, obs, schedule, cfg,
                                               stream)
    steps = visited * n_steps_per_layer
    gflops = _cost_from_counts(cost_model, layers_run=layer, head_evals=0,
                               denoise_steps=steps,
                               comparisons=visited - 1)
    return InferenceTrace(exit_layer=layer, taps_visited=visited,
                          layers_run=layer, head_evals=0,
                          denoise_steps=steps, comparisons=visited - 1,
                          gflops=gflops, chunk=chunk, discrepancies=discs)


def expected_exit_stats(p: ExitDistribution | Sequence[float],
                        schedule: ExitSchedule,
                        cost_model: CostModel | None = None,
                        head_cfg: HeadConfig | None = None
                        ) -> tuple[float, float]:
    """Planning view: expected exit layer and expected accounted GFLOPs if
    exits realize exactly the target probabilities."""
    cost_model = cost_model or CostModel()
    head_cfg = head_cfg or HeadConfig(kind="mlp")
    probs = np.asarray(p.probs if isinstance(p, ExitDistribution) else p,
                       dtype=np.float64)
    if probs.shape != (len(schedule.exit_layers),):
        raise ValueError("one probability per exit layer")
    if np.any(probs < 0.0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must be non-negative and sum to 1")
    exp_layer = 0.0
    exp_cost = 0.0
    for k, (pk, layer) in enumerate(zip(probs, schedule.exit_layers)):
        visited = k + 2  # baseline tap plus exits 0..k
        if head_cfg.kind == "mlp":
            head_evals, steps = visited, 0
        else:
            head_evals, steps = 0, visited * head_cfg.n_steps
        cost = _cost_from_counts(cost_model, layers_run=layer,
                                 head_evals=head_evals, denoise_steps=steps,
                                 comparisons=visited - 1)
        exp_layer += pk * layer
        exp_cost += pk * cost
    return exp_layer, exp_cost
