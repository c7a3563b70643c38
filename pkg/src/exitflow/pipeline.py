"""End-to-end pipeline stages shared by the CLI and the test harness.

Seed discipline: every stage derives its own stream from the single run
seed, so stages can be re-run independently (or via different commands)
and still agree bit-for-bit. In particular the calibration collection
seed for a given head protocol is the same whether it is reached through
`calibrate` or through a bench sweep.
"""

from __future__ import annotations

import numpy as np

from .bench import BenchEntry, BenchReport, run_benchmark, sweep_entries
from .calibrate import (
    DiscrepancyMatrix,
    ExitDistribution,
    ExitSchedule,
    calibrate_thresholds,
    collect_discrepancies,
    exit_distribution,
)
from .config import RunConfig
from .nn import LrSchedule, derive_seed, draw_uniform, optimizer_init, rng_stream
from .policies import (
    HeadConfig,
    OracleLayeredPolicy,
    ToyPolicy,
    policy_params,
    train_step,
)
from .task import Episode, gen_dataset


def data_seed(cfg: RunConfig, split: str) -> int:
    return derive_seed(cfg.run.seed, "data", split)


def split_dataset(cfg: RunConfig, split: str) -> list[Episode]:
    n = {"train": cfg.task.n_train, "calib": cfg.task.n_calib,
         "eval": cfg.task.n_eval}[split]
    return gen_dataset(cfg.task, data_seed(cfg, split), n)


def make_oracle(cfg: RunConfig) -> OracleLayeredPolicy:
    m = cfg.model
    return OracleLayeredPolicy(spec=cfg.task, layers=m.n_layers,
                               tap_stride=m.tap_stride, gamma=m.gamma,
                               zeta=m.zeta, seed=cfg.run.seed,
                               mixture_std=m.mixture_std,
                               mlp_steps=m.mlp_steps)


def init_policy(cfg: RunConfig) -> ToyPolicy:
    m = cfg.model
    return ToyPolicy.init(n_layers=m.n_layers, width=m.width,
                          chunk_shape=cfg.task.chunk_shape,
                          head_kinds=m.heads, seed=cfg.run.seed,
                          tap_stride=m.tap_stride)


def runtime_head_config(cfg: RunConfig) -> HeadConfig:
    r = cfg.runtime
    if r.head == "mlp":
        return HeadConfig(kind="mlp")
    return HeadConfig(kind="fm", n_steps=r.n_steps, warm_start=r.warm_start)


def collection_seed(cfg: RunConfig, head_cfg: HeadConfig) -> int:
    base = derive_seed(cfg.run.seed, "calibration")
    n_steps = head_cfg.n_steps if head_cfg.kind == "fm" else 0
    warm = head_cfg.warm_start if head_cfg.kind == "fm" else False
    return derive_seed(base, "collect", head_cfg.kind, n_steps, warm)


def train_policy(cfg: RunConfig, episodes: list[Episode] | None = None,
                 log=None):
    """Train a fresh toy policy; heads train sequentially in config order
    over a shared backbone.

    Returns (policy, stream, per-kind mean loss over the last 50 steps).
    The returned stream is the training noise stream after the final
    update, suitable for checkpointing.
    """
    if cfg.model.kind != "toy":
        raise ValueError(f"model kind {cfg.model.kind!r} is not trainable")
    if episodes is None:
        episodes = split_dataset(cfg, "train")
    policy = init_policy(cfg)
    t = cfg.train
    n = len(episodes)
    stream = rng_stream(derive_seed(cfg.run.seed, "train"))
    batch_stream = rng_stream(derive_seed(cfg.run.seed, "batch"))
    last_losses: dict[str, float] = {}
    for kind in cfg.model.heads:
        schedule = LrSchedule(base_lr=t.lr, warmup_steps=t.warmup_steps,
                              total_steps=max(t.steps, 1))
        opt = optimizer_init(policy_params(policy, kind), schedule,
                             weight_decay=t.weight_decay)
        tail: list[float] = []
        for step in range(t.steps):
            idx = (draw_uniform(batch_stream, t.batch_size) * n).astype(int)
            batch = [episodes[i] for i in idx]
            loss = train_step(policy, batch, kind, t.supervision, opt,
                              stream, p_mask=t.p_mask)
            tail.append(loss)
            if len(tail) > 50:
                tail.pop(0)
            if log is not None and (step + 1) % 200 == 0:
                log(f"{kind} step {step + 1}/{t.steps} loss {loss:.5f}")
        last_losses[kind] = float(np.mean(tail)) if tail else float("nan")
    return policy, stream, last_losses


def calibrate_policy(cfg: RunConfig, policy,
                     episodes: list[Episode] | None = None
                     ) -> tuple[ExitSchedule, ExitDistribution,
                                DiscrepancyMatrix, int]:
    """Collect discrepancies under the runtime head protocol and fit the
    configured exit distribution's thresholds."""
    if episodes is None:
        episodes = split_dataset(cfg, "calib")
    head_cfg = runtime_head_config(cfg)
    seed = collection_seed(cfg, head_cfg)
    v = collect_discrepancies(policy, episodes, cfg.calibration.metric,
                              head_cfg, base_seed=seed)
    cal = cfg.calibration
    dist = exit_distribution(cal.distribution, cal.c, v.n_exits,
                             sigma=cal.sigma, scale=cal.scale)
    schedule = calibrate_thresholds(v, dist, mode=cal.mode)
    return schedule, dist, v, seed


def bench_policy(cfg: RunConfig, policy, *, config_hash: str = "",
                 schedule: ExitSchedule | None = None,
                 workers: int | None = None) -> BenchReport:
    """Run the benchmark sweep (or a single provided schedule) plus the
    mandatory full-depth baselines on the eval split."""
    eval_eps = split_dataset(cfg, "eval")
    if schedule is not None:
        r = cfg.runtime
        entries = [BenchEntry(
            config_id=f"{r.head}-calibrated", head_kind=r.head,
            n_steps=r.n_steps if r.head == "fm" else 0,
            warm_start=r.warm_start if r.head == "fm" else False,
            schedule=schedule, c=cfg.calibration.c,
            mode=cfg.calibration.mode)]
    else:
        calib_eps = split_dataset(cfg, "calib")
        cal = cfg.calibration
        entries = sweep_entries(
            policy, calib_eps, metric=cal.metric,
            dist_kind=cal.distribution, c_grid=cfg.bench.c_grid,
            sigma=cal.sigma, scale=cal.scale, mode=cal.mode,
            head_kinds=cfg.model.heads,
            n_steps_grid=cfg.bench.n_steps_grid,
            warm_grid=cfg.bench.warm_grid,
            base_seed=derive_seed(cfg.run.seed, "calibration"))
    return run_benchmark(policy, entries, eval_eps, cfg.cost, cfg.task,
                         config_hash=config_hash,
                         seed=derive_seed(cfg.run.seed, "bench"),
                         workers=workers)
