#!/usr/bin/env python3
"""Benchmark sweep driver: calibrate + bench a config and print the table.

Equivalent to `exitflow bench` plus a formatted summary, handy when iterating
on budgets. Respects EXITFLOW_THREADS for the evaluation pool.

    python scripts/oracle_sweep.py --config configs/oracle.toml --out runs/sw
"""

import argparse
from pathlib import Path

from exitflow import bench_policy, config_hash, emit_report, load_config
from exitflow.pipeline import make_oracle, train_policy


def fmt(row) -> str:
    reduction = ("      -" if row.reduction_pct is None
                 else f"{row.reduction_pct:6.1f}%")
    err = ("        -" if row.mean_chunk_error is None
           else f"{row.mean_chunk_error:9.4f}")
    return (f"{row.config_id:<16} {row.status:<6} "
            f"succ {row.success_rate:6.3f}  err {err}  "
            f"GFLOPs {row.mean_gflops:9.2f}  vs full {reduction}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()

    cfg = load_config(args.config)
    if cfg.model.kind == "oracle":
        policy = make_oracle(cfg)
    else:
        print(f"training toy policy ({cfg.train.steps} steps)...")
        policy, _, losses = train_policy(cfg)
        print("  final losses:", losses)

    report = bench_policy(cfg, policy, config_hash=config_hash(cfg),
                          workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fmt_name, name in (("csv", "report.csv"),
                           ("structured-text", "report.toml")):
        emit_report(report, fmt_name, out / name)

    print(f"\n{len(report.rows)} configurations "
          f"(config {report.config_hash}, seed {report.seed})")
    for row in report.rows:
        print(" ", fmt(row))
    print(f"\nreports under {out}/")


if __name__ == "__main__":
    main()
