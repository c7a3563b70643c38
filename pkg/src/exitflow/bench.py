"""Benchmark orchestration and report emission.

A benchmark run evaluates a set of configurations (full-depth baselines
plus early-exit schedules under various head protocols and budget
criteria) over one episode dataset, aggregating success rate, chunk
error, accounted GFLOPs, and the exit-layer histogram per configuration.

Reports are emitted as CSV or structured text with a fixed column order;
exit histograms always go to a `.hist.csv` sidecar next to the report.
"""

from __future__ import annotations

import csv
import io
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomlkit

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

from .calibrate import (
    ExitSchedule,
    calibrate_thresholds,
    collect_discrepancies,
    episode_stream,
    exit_distribution,
)
from .engine import (
    CostModel,
    _cost_from_counts,
    infer_fm_early_exit,
    infer_full,
    infer_mlp_early_exit,
)
from .nn import derive_seed
from .policies import HeadConfig, LayerTappedPolicy
from .store import StoreError
from .task import Episode, SyntheticTaskSpec, chunk_error, task_success

REPORT_VERSION = 1

CSV_COLUMNS = ("config_id", "c", "head_kind", "n_steps", "warm_start",
               "mode", "status", "n_episodes", "success_rate",
               "mean_chunk_error", "mean_gflops", "full_gflops",
               "reduction_pct")


def worker_count(requested: int | None = None) -> int:
    """Worker threads for episode evaluation, capped by EXITFLOW_THREADS."""
    raw = os.environ.get("EXITFLOW_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ValueError(f"EXITFLOW_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ValueError("EXITFLOW_THREADS must be at least 1")
    return max(1, min(requested, cap)) if requested is not None else cap


@dataclass(frozen=True)
class BenchEntry:
    """One benchmark configuration: a head protocol plus (optionally) an
    exit schedule. schedule=None means full-depth inference."""

    config_id: str
    head_kind: str
    n_steps: int  # denoising steps per tap; 0 for the mlp head
    warm_start: bool
    schedule: ExitSchedule | None = None
    c: float | None = None
    mode: str = "full"


@dataclass(frozen=True)
class BenchRow:
    config_id: str
    c: float | None
    head_kind: str
    n_steps: int
    warm_start: bool
    mode: str
    status: str
    n_episodes: int
    success_rate: float | None
    mean_chunk_error: float | None
    mean_gflops: float | None
    full_gflops: float
    reduction_pct: float | None
    exit_histogram: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[BenchRow, ...]
    config_hash: str
    seed: int
    format_version: int = REPORT_VERSION


def baseline_entries(policy: LayerTappedPolicy,
                     fm_steps: tuple[int, ...] = (10, 2)
                     ) -> list[BenchEntry]:
    """The mandatory full-depth comparison points."""
    out = []
    if policy.supports("mlp"):
        out.append(BenchEntry("full-mlp", "mlp", 0, False))
    if policy.supports("fm"):
        for n in fm_steps:
            out.append(BenchEntry(f"full-fm-{n}", "fm", n, True))
    return out


def _full_cost(cost_model: CostModel, n_layers: int, head_kind: str,
               n_steps: int) -> float:
    if head_kind == "mlp":
        return _cost_from_counts(cost_model, n_layers, 1, 0, 0)
    return _cost_from_counts(cost_model, n_layers, 0, n_steps, 0)


def _eval_entry(policy, entry: BenchEntry, episodes: list[Episode],
                cost_model: CostModel, spec: SyntheticTaskSpec,
                seed: int, workers: int) -> BenchRow:
    row_seed = derive_seed(seed, "bench", entry.config_id)
    full = _full_cost(cost_model, policy.n_layers, entry.head_kind,
                      entry.n_steps)

    def eval_one(i: int):
        ep = episodes[i]
        if entry.schedule is None:
            if entry.head_kind == "mlp":
                trace = infer_full(policy, ep.obs, HeadConfig(kind="mlp"),
                                   cost_model)
            else:
                cfg = HeadConfig(kind="fm", n_steps=entry.n_steps,
                                 warm_start=entry.warm_start)
                trace = infer_full(policy, ep.obs, cfg, cost_model,
                                   stream=episode_stream(row_seed, i))
        elif entry.head_kind == "mlp":
            trace = infer_mlp_early_exit(policy, ep.obs, entry.schedule,
                                         cost_model)
        else:
            trace = infer_fm_early_exit(policy, ep.obs, entry.schedule,
                                        entry.n_steps, entry.warm_start,
                                        episode_stream(row_seed, i),
                                        cost_model)
        return (trace.exit_layer, trace.gflops,
                task_success(trace.chunk, ep, spec),
                chunk_error(trace.chunk, ep, spec))

    n = len(episodes)
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(eval_one, range(n)))
        else:
            results = [eval_one(i) for i in range(n)]
    except Exception as exc:  # engine failure: record, keep benching
        return BenchRow(
            config_id=entry.config_id, c=entry.c,
            head_kind=entry.head_kind, n_steps=entry.n_steps,
            warm_start=entry.warm_start, mode=entry.mode,
            status=f"error: {type(exc).__name__}: {exc}", n_episodes=n,
            success_rate=None, mean_chunk_error=None, mean_gflops=None,
            full_gflops=full, reduction_pct=None)

    # fixed-order reduction: results are indexed by episode, so the
    # aggregate is identical for any worker count
    hist = Counter(r[0] for r in results)
    mean_gflops = float(np.mean([r[1] for r in results]))
    return BenchRow(
        config_id=entry.config_id, c=entry.c, head_kind=entry.head_kind,
        n_steps=entry.n_steps, warm_start=entry.warm_start, mode=entry.mode,
        status="ok", n_episodes=n,
        success_rate=float(np.mean([r[2] for r in results])),
        mean_chunk_error=float(np.mean([r[3] for r in results])),
        mean_gflops=mean_gflops, full_gflops=full,
        reduction_pct=100.0 * (1.0 - mean_gflops / full),
        exit_histogram=tuple(sorted(hist.items())))


def run_benchmark(policy: LayerTappedPolicy, entries, episodes,
                  cost_model: CostModel, spec: SyntheticTaskSpec, *,
                  config_hash: str = "", seed: int = 0,
                  workers: int | None = None,
                  add_baselines: bool = True) -> BenchReport:
    entries = list(entries)
    if add_baselines:
        have = {e.config_id for e in entries}
        entries = [b for b in baseline_entries(policy)
                   if b.config_id not in have] + entries
    if not entries:
        raise ValueError("benchmark grid is empty")
    episodes = list(episodes)
    if not episodes:
        raise ValueError("benchmark dataset is empty")
    w = worker_count(workers)
    rows = tuple(_eval_entry(policy, e, episodes, cost_model, spec, seed, w)
                 for e in entries)
    return BenchReport(rows=rows, config_hash=config_hash, seed=seed)


def sweep_entries(policy: LayerTappedPolicy, calib_episodes, *,
                  metric: str, dist_kind: str, c_grid, sigma: float,
                  scale: float, mode: str, head_kinds, n_steps_grid,
                  warm_grid, base_seed: int) -> list[BenchEntry]:
    """Calibrate one schedule per (head protocol, c) pair.

    The discrepancy matrix is collected once per head protocol and reused
    across the c grid, since thresholds are a pure function of (V, p).
    """
    entries: list[BenchEntry] = []
    for kind in head_kinds:
        if not policy.supports(kind):
            continue
        protocols = ([(0, False)] if kind == "mlp"
                     else [(n, w) for n in n_steps_grid for w in warm_grid])
        for n_steps, warm in protocols:
            cfg = (HeadConfig(kind="mlp") if kind == "mlp"
                   else HeadConfig(kind="fm", n_steps=n_steps,
                                   warm_start=warm))
            seed_k = derive_seed(base_seed, "collect", kind, n_steps, warm)
            v = collect_discrepancies(policy, calib_episodes, metric, cfg,
                                      base_seed=seed_k)
            for c in c_grid:
                p = exit_distribution(dist_kind, c, v.n_exits, sigma=sigma,
                                      scale=scale)
                sched = calibrate_thresholds(v, p, mode=mode)
                tag = (f"{kind}-c{c:g}" if kind == "mlp"
                       else f"{kind}-n{n_steps}{'w' if warm else 'c'}"
                            f"-c{c:g}")
                entries.append(BenchEntry(
                    config_id=tag, head_kind=kind, n_steps=n_steps,
                    warm_start=warm, schedule=sched, c=c, mode=mode))
    return entries


# ---------------------------------------------------------------------------
# Report emission / parsing
# ---------------------------------------------------------------------------


def _hist_path(path: Path) -> Path:
    return path.with_name(path.stem + ".hist.csv")


def _format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_cell(name: str, text: str):
    if name in ("config_id", "head_kind", "mode", "status"):
        return text
    if text == "":
        return None
    if name in ("n_steps", "n_episodes"):
        return int(text)
    if name == "warm_start":
        return text == "true"
    return float(text)


def _write_hist_sidecar(report: BenchReport, path: Path) -> None:
    lines = [f"# exitflow-hist-v{REPORT_VERSION}",
             f"# config_hash={report.config_hash}",
             "config_id,exit_layer,count"]
    for row in report.rows:
        for layer, count in row.exit_histogram:
            lines.append(f"{row.config_id},{layer},{count}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_hist_sidecar(path: Path) -> dict[str, list[tuple[int, int]]]:
    if not path.exists():
        raise StoreError(f"missing histogram sidecar {path}")
    hists: dict[str, list[tuple[int, int]]] = {}
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(line for line in fh
                            if not line.startswith("#"))
        header = next(reader, None)
        if header != ["config_id", "exit_layer", "count"]:
            raise StoreError(f"{path}: unexpected sidecar header {header}")
        for rec in reader:
            hists.setdefault(rec[0], []).append((int(rec[1]), int(rec[2])))
    return hists


def emit_report(report: BenchReport, fmt: str, path: str | Path) -> None:
    path = Path(path)
    if fmt == "csv":
        buf = io.StringIO()
        buf.write(f"# exitflow-report-v{report.format_version}\n"
                  f"# config_hash={report.config_hash}\n"
                  f"# seed={report.seed}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in report.rows:
            writer.writerow([_format_cell(getattr(row, col))
                             for col in CSV_COLUMNS])
        try:
            path.write_text(buf.getvalue(), encoding="utf-8")
        except OSError as exc:
            raise StoreError(f"cannot write {path}: {exc}") from exc
    elif fmt == "structured-text":
        doc = {"report": {"format_version": report.format_version,
                          "config_hash": report.config_hash,
                          "seed": report.seed},
               "rows": [{col: getattr(row, col) for col in CSV_COLUMNS
                         if getattr(row, col) is not None}
                        for row in report.rows]}
        try:
            path.write_text(tomlkit.dumps(doc), encoding="utf-8")
        except OSError as exc:
            raise StoreError(f"cannot write {path}: {exc}") from exc
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    _write_hist_sidecar(report, _hist_path(path))


def parse_report(path: str | Path) -> BenchReport:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise StoreError(f"cannot read {path}: {exc}") from exc
    hists = _read_hist_sidecar(_hist_path(path))
    if text.startswith("# exitflow-report-"):
        return _parse_csv(path, text, hists)
    return _parse_toml(path, text, hists)


def _parse_csv(path: Path, text: str, hists) -> BenchReport:
    meta = {}
    body = []
    for line in text.splitlines():
        if line.startswith("# ") and "=" in line:
            k, _, v = line[2:].partition("=")
            meta[k] = v
        elif not line.startswith("#"):
            body.append(line)
    reader = csv.reader(body)
    header = next(reader, None)
    if tuple(header or ()) != CSV_COLUMNS:
        raise StoreError(f"{path}: unexpected report columns {header}")
    rows = []
    for rec in reader:
        if len(rec) != len(CSV_COLUMNS):
            raise StoreError(f"{path}: row has {len(rec)} columns, "
                             f"expected {len(CSV_COLUMNS)}")
        d = {col: _parse_cell(col, cell)
             for col, cell in zip(CSV_COLUMNS, rec)}
        d["exit_histogram"] = tuple(hists.get(d["config_id"], ()))
        rows.append(BenchRow(**d))
    return BenchReport(rows=tuple(rows),
                       config_hash=meta.get("config_hash", ""),
                       seed=int(meta.get("seed", 0)))


def _parse_toml(path: Path, text: str, hists) -> BenchReport:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise StoreError(f"{path}: malformed report: {exc}") from exc
    head = doc.get("report", {})
    rows = []
    for rec in doc.get("rows", []):
        unknown = set(rec) - set(CSV_COLUMNS)
        if unknown:
            raise StoreError(f"{path}: unknown row keys {sorted(unknown)}")
        d = {col: rec.get(col) for col in CSV_COLUMNS}
        d["exit_histogram"] = tuple(hists.get(d["config_id"], ()))
        rows.append(BenchRow(**d))
    return BenchReport(rows=tuple(rows),
                       config_hash=head.get("config_hash", ""),
                       seed=int(head.get("seed", 0)))
