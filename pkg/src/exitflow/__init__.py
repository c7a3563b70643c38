"""Budget-aware early-exit inference for layered predictors.

The package covers the full loop: synthetic task generation, multi-exit
training of a toy layered policy (regression or flow-matching action head),
threshold calibration from a target exit distribution, early-exit inference
with FLOPs accounting, and a seeded benchmark harness with reproducible
artifacts. `exitflow.cli` exposes the same loop as the `exitflow` command.
"""

__version__ = "0.1.0"

from .bench import BenchEntry, BenchReport, BenchRow, emit_report, parse_report, run_benchmark
from .calibrate import (
    DiscrepancyMatrix,
    ExitDistribution,
    ExitSchedule,
    calibrate_thresholds,
    calibration_partition,
    collect_discrepancies,
    discrepancy,
    exit_distribution,
    exit_fractions,
    nearest_rank_quantile,
)
from .config import ConfigError, RunConfig, config_hash, load_config
from .engine import (
    CostModel,
    InferenceTrace,
    account_cost,
    expected_exit_stats,
    infer_fm_early_exit,
    infer_full,
    infer_mlp_early_exit,
)
from .flow import (
    GaussianMixture,
    IntegrationError,
    cfm_loss,
    conditional_path,
    euler_integrate,
    gm_field_fn,
    gm_marginal_field,
    gm_sample,
    target_field,
)
from .nn import RngStream, derive_seed, rng_stream
from .pipeline import bench_policy, calibrate_policy, train_policy
from .policies import HeadConfig, OracleLayeredPolicy, ToyPolicy, tap_chain
from .store import (
    load_calibration,
    load_checkpoint,
    load_dataset,
    save_calibration,
    save_checkpoint,
    save_dataset,
)
from .task import Episode, SyntheticTaskSpec, chunk_error, gen_dataset, task_success

__all__ = [
    "__version__",
    # task
    "SyntheticTaskSpec", "Episode", "gen_dataset", "task_success",
    "chunk_error",
    # rng
    "RngStream", "rng_stream", "derive_seed",
    # flow matching
    "GaussianMixture", "IntegrationError", "conditional_path", "target_field",
    "cfm_loss", "euler_integrate", "gm_sample", "gm_marginal_field",
    "gm_field_fn",
    # policies
    "ToyPolicy", "OracleLayeredPolicy", "HeadConfig", "tap_chain",
    # calibration
    "DiscrepancyMatrix", "ExitDistribution", "ExitSchedule", "discrepancy",
    "collect_discrepancies", "exit_distribution", "calibrate_thresholds",
    "calibration_partition", "exit_fractions", "nearest_rank_quantile",
    # inference + cost
    "CostModel", "InferenceTrace", "account_cost", "infer_full",
    "infer_mlp_early_exit", "infer_fm_early_exit", "expected_exit_stats",
    # config + artifacts
    "RunConfig", "ConfigError", "load_config", "config_hash",
    "save_checkpoint", "load_checkpoint", "save_dataset", "load_dataset",
    "save_calibration", "load_calibration",
    # pipeline + bench
    "train_policy", "calibrate_policy", "bench_policy",
    "BenchEntry", "BenchRow", "BenchReport", "run_benchmark", "emit_report",
    "parse_report",
]
