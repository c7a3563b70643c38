#!/usr/bin/env python3
"""Warm-start ablation on the analytic oracle's full tap chain.

For each per-tap step count, walk every tap of the layered oracle with the
flow head, warm-started vs cold-started, and report total denoising steps
and mean distance to the exact flow (64 steps from the episode's first noise
draw under the deepest layer's field). Warm start reuses the previous tap's
output, so it keeps the basin chosen by that first draw; cold start
re-randomizes it at every tap.
"""

import numpy as np

from exitflow import HeadConfig, OracleLayeredPolicy, SyntheticTaskSpec, gen_dataset
from exitflow.calibrate import ExitSchedule, episode_stream
from exitflow.engine import infer_fm_early_exit
from exitflow.nn import derive_seed
from exitflow.policies import _draw_chunk_noise

N_EPISODES = 1000
STEP_GRID = (10, 4, 2, 1)
RUN_SEED = 0


def main() -> None:
    spec = SyntheticTaskSpec()
    oracle = OracleLayeredPolicy(spec=spec, layers=8, tap_stride=2,
                                 seed=RUN_SEED)
    episodes = gen_dataset(spec, derive_seed(RUN_SEED, "data", "eval"),
                           N_EPISODES)
    bench_seed = derive_seed(RUN_SEED, "bench")
    taps = oracle.eligible_taps
    never_exit = ExitSchedule(
        baseline_layer=taps[0], exit_layers=taps[1:],
        thresholds=(-np.inf,) * (len(taps) - 2) + (np.inf,),
        metric="l2", mode="renormalized")

    first_noise = np.stack([
        _draw_chunk_noise(episode_stream(bench_seed, i), spec.chunk_shape)
        for i in range(N_EPISODES)])
    refs = oracle.predict_batch(
        [e.obs for e in episodes], oracle.n_layers,
        HeadConfig(kind="fm", n_steps=64, warm_start=False),
        inits=first_noise)

    print(f"{N_EPISODES} episodes, taps {taps}, reference = 64-step flow")
    print(f"{'steps/tap':>9}  {'mode':<4}  {'denoise steps':>13}  "
          f"{'err vs exact':>12}")
    for n_steps in STEP_GRID:
        for warm in (True, False):
            traces = [infer_fm_early_exit(oracle, e.obs, never_exit, n_steps,
                                          warm, episode_stream(bench_seed, i))
                      for i, e in enumerate(episodes)]
            chunks = np.stack([t.chunk for t in traces])
            err = float(np.mean(np.sqrt(
                np.mean((chunks - refs) ** 2, axis=(1, 2)))))
            total = sum(t.denoise_steps for t in traces)
            print(f"{n_steps:>9}  {'warm' if warm else 'cold':<4}  "
                  f"{total:>13}  {err:>12.5f}")


if __name__ == "__main__":
    main()
