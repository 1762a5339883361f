"""Run orchestration, evaluation, timing and reporting."""

from __future__ import annotations

from .bench import BenchReport, benchmark_time, machine_idle
from .config import RunConfig, derive_seed, load_config
from .report import CSV_HEADER, emit_csv, parse_csv, plot_run
from .training import (EvalWindow, MetricsRow, RunMetrics, Sampler, UniformPolicy, evaluate,
                       greedy_joint_action, train, train_plain_mappo)

__all__ = [
    "BenchReport", "benchmark_time", "machine_idle", "RunConfig", "derive_seed", "load_config",
    "CSV_HEADER", "emit_csv", "parse_csv", "plot_run", "EvalWindow", "MetricsRow",
    "RunMetrics", "Sampler", "UniformPolicy", "evaluate", "greedy_joint_action", "train",
    "train_plain_mappo",
]
