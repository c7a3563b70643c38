"""Command-line interface.

    exitflow <command> --config <path> [--out <dir>] [--seed <u64>]

Commands: gen-data, train, calibrate, bench, report. Exit codes: 0 on
success, 1 for usage/configuration errors, 2 for runtime failures.
Errors print a single `error: ...` line on stderr. If a command fails
partway, the files it already wrote in this invocation are removed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .bench import _hist_path, emit_report, parse_report
from .config import ConfigError, config_hash, load_config
from .pipeline import (
    bench_policy,
    calibrate_policy,
    data_seed,
    make_oracle,
    runtime_head_config,
    split_dataset,
    train_policy,
)
from .store import (
    StoreError,
    load_calibration,
    load_checkpoint,
    save_calibration,
    save_checkpoint,
    save_dataset,
    v_summary_dict,
)


class UsageError(Exception):
    """Bad invocation: wrong flags, missing inputs, unusable config."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route through our own
    # error type so usage problems exit 1 and runtime failures keep 2
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="exitflow",
                     description="budget-aware early-exit inference "
                                 "harness for layered predictors")
    sub = parser.add_subparsers(dest="command", metavar="<command>")

    def add(name: str, help_: str, *, config=True, checkpoint=False,
            calibration=False, infile=False):
        sp = sub.add_parser(name, help=help_)
        if config:
            sp.add_argument("--config", required=True,
                            help="run configuration (TOML)")
        sp.add_argument("--out", default=".",
                        help="output directory (default: current)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config's run seed")
        if checkpoint:
            sp.add_argument("--checkpoint", default=None,
                            help="trained model container (required for "
                                 "toy models)")
        if calibration:
            sp.add_argument("--calibration", default=None,
                            help="calibration artifact; omit to sweep the "
                                 "configured bench grid")
        if infile:
            sp.add_argument("--in", dest="infile", required=True,
                            help="existing bench report (csv or toml)")
        return sp

    add("gen-data", "write train/calib/eval episode datasets")
    add("train", "train the toy policy and write a checkpoint")
    add("calibrate", "collect discrepancies and write exit thresholds",
        checkpoint=True)
    add("bench", "evaluate early-exit configurations and write reports",
        checkpoint=True, calibration=True)
    add("report", "re-emit a bench report as CSV", config=False,
        infile=True)
    return parser


def _load_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = cfg.with_seed(args.seed)
    return cfg, config_hash(cfg)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_policy(cfg, args):
    """The model under test: the analytic oracle straight from config, or
    a trained toy policy from --checkpoint."""
    if cfg.model.kind == "oracle":
        return make_oracle(cfg)
    if getattr(args, "checkpoint", None) is None:
        raise UsageError("toy models need --checkpoint "
                         "(run `exitflow train` first)")
    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    policy, _step, _stream, _meta = load_checkpoint(path)
    return policy


def cmd_gen_data(args, written) -> None:
    cfg, h = _load_config(args)
    out = _outdir(args)
    for split in ("train", "calib", "eval"):
        eps = split_dataset(cfg, split)
        path = out / f"{split}.efc"
        save_dataset(eps, path, spec=cfg.task,
                     seed=data_seed(cfg, split), config_hash=h)
        written.append(path)
        print(f"wrote {path} ({len(eps)} episodes)")


def cmd_train(args, written) -> None:
    cfg, h = _load_config(args)
    if cfg.model.kind == "oracle":
        raise UsageError("model kind 'oracle' has no trainable parameters; "
                         "set model.kind = 'toy'")
    out = _outdir(args)
    policy, stream, losses = train_policy(cfg, log=print)
    path = out / "checkpoint.efc"
    save_checkpoint(policy, path, step=cfg.train.steps, stream=stream,
                    config_hash=h)
    written.append(path)
    tail = ", ".join(f"{k}={v:.5f}" for k, v in losses.items())
    print(f"wrote {path} (mean loss over last steps: {tail})")


def cmd_calibrate(args, written) -> None:
    cfg, h = _load_config(args)
    out = _outdir(args)
    policy = _resolve_policy(cfg, args)
    schedule, dist, v, seed_k = calibrate_policy(cfg, policy)
    head_cfg = runtime_head_config(cfg)
    path = out / "calibration.toml"
    save_calibration(
        schedule, dist, path, config_hash=h,
        collection={"base_seed": seed_k, "head": head_cfg.kind,
                    "n_steps": head_cfg.n_steps,
                    "warm_start": head_cfg.warm_start,
                    "metric": cfg.calibration.metric,
                    "n_samples": v.n_samples},
        v_summary=v_summary_dict(v.values))
    written.append(path)
    print(f"wrote {path}")
    print(f"p = {list(dist.probs)}")
    print(f"eta = {list(schedule.thresholds)}")


def cmd_bench(args, written) -> None:
    cfg, h = _load_config(args)
    out = _outdir(args)
    policy = _resolve_policy(cfg, args)
    schedule = None
    if args.calibration is not None:
        cal_path = Path(args.calibration)
        if not cal_path.exists():
            raise UsageError(f"calibration artifact not found: {cal_path}")
        schedule, _dist, _meta = load_calibration(cal_path)
    report = bench_policy(cfg, policy, config_hash=h, schedule=schedule)
    for fmt, name in (("csv", "report.csv"),
                      ("structured-text", "report.toml")):
        path = out / name
        emit_report(report, fmt, path)
        written.append(path)
        written.append(_hist_path(path))
        print(f"wrote {path}")
    ok = sum(r.status == "ok" for r in report.rows)
    print(f"{ok}/{len(report.rows)} configurations ok")


def cmd_report(args, written) -> None:
    src = Path(args.infile)
    if not src.exists():
        raise UsageError(f"report not found: {src}")
    report = parse_report(src)
    out = _outdir(args)
    path = out / "report.csv"
    emit_report(report, "csv", path)
    written.append(path)
    written.append(_hist_path(path))
    print(f"wrote {path} ({len(report.rows)} rows)")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "bench": cmd_bench,
    "report": cmd_report,
}


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv=None) -> int:
    parser = build_parser()
    written: list[Path] = []
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command (try `exitflow --help`)")
        COMMANDS[args.command](args, written)
        return 0
    except (UsageError, ConfigError) as exc:
        for p in written:
            Path(p).unlink(missing_ok=True)
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        for p in written:
            Path(p).unlink(missing_ok=True)
        print(f"error: {type(exc).__name__}: {_one_line(exc)}",
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
