"""Wall-clock comparison of two training configurations."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .config import RunConfig
from .training import RunMetrics, train

LOAD_TOLERANCE = 0.20


def load_probe(size: int = 256, repeats: int = 20) -> float:
    """Seconds for a fixed matrix-multiply workload."""
    a = np.random.default_rng(0).standard_normal((size, size))
    t0 = time.perf_counter()
    for _ in range(repeats):
        a = np.tanh(a @ a.T / size)
    return time.perf_counter() - t0


def machine_idle(probes: int = 3, tolerance: float = LOAD_TOLERANCE) -> tuple[bool, list[float]]:
    """Idle-load sanity check: relative spread of ``probes`` warmup timings."""
    load_probe()  # discard the first, cold call
    times = [load_probe() for _ in range(probes)]
    spread = (max(times) - min(times)) / float(np.mean(times))
    return spread <= tolerance, times


@dataclass
class PhaseTimes:
    sampling_s: float
    updating_s: float
    total_s: float

    @classmethod
    def of(cls, m: RunMetrics) -> "PhaseTimes":
        return cls(m.sampling_time_s, m.updating_time_s, m.wall_time_s)


@dataclass
class BenchReport:
    baseline: PhaseTimes
    candidate: PhaseTimes
    updating_reduction_pct: float
    total_reduction_pct: float
    sampling_share: float
    reliable: bool
    probe_times: list[float]

    @property
    def sampling_dominates(self) -> bool:
        return self.sampling_share > 0.5

    def as_dict(self) -> dict:
        return asdict(self)


def _reduction(base: float, cand: float) -> float:
    return 100.0 * (base - cand) / base if base > 0 else 0.0


def _differ_only_in_lns(a: RunConfig, b: RunConfig) -> bool:
    skip = {"scheduler", "m", "alns_sizes", "blns_permutation", "output"}
    return all(getattr(a, f.name) == getattr(b, f.name) for f in fields(RunConfig)
               if f.name not in skip)


def benchmark_time(baseline: RunConfig, candidate: RunConfig) -> tuple[BenchReport, RunMetrics, RunMetrics]:
    """Train both configs back to back and compare phase times.

    The report is flagged unreliable when the warmup load probes disagree by
    more than 20%.
    """
    if not _differ_only_in_lns(baseline, candidate):
        raise ValueError("benchmark configs may differ only in scheduler and neighborhood size")
    reliable, probes = machine_idle()
    base_m = train(baseline)
    cand_m = train(candidate)
    b, c = PhaseTimes.of(base_m), PhaseTimes.of(cand_m)
    share = b.sampling_s / (b.sampling_s + b.updating_s) if b.sampling_s + b.updating_s else 0.0
    report = BenchReport(
        baseline=b, candidate=c,
        updating_reduction_pct=_reduction(b.updating_s, c.updating_s),
        total_reduction_pct=_reduction(b.total_s, c.total_s),
        sampling_share=share, reliable=reliable, probe_times=probes,
    )
    return report, base_m, cand_m
