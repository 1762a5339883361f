"""Neighborhood schedulers for large-neighborhood-search training.

Each LNS iteration trains on the data of a subset of agents (the
neighborhood). Four schedulers decide the subsets:

full
    every agent, every time (plain MAPPO).
rlns
    a uniformly random m-subset, drawn without replacement.
blns
    consecutive m-blocks of one fixed permutation, wrapping around cyclically.
alns
    random subsets whose size starts at 2 and grows after two LNS iterations
    in a row fail to improve the evaluation metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import AgentTrajectory, DecPomdpSpec, Trajectory, decompose

SCHEDULERS = ("full", "rlns", "blns", "alns")


class ContractViolation(ValueError):
    pass


@dataclass(frozen=True)
class Neighborhood:
    agent_ids: tuple[int, ...]
    lns_iteration: int
    scheduler_tag: str

    def __post_init__(self):
        ids = tuple(int(i) for i in self.agent_ids)
        object.__setattr__(self, "agent_ids", ids)
        if not ids:
            raise ContractViolation("a neighborhood needs at least one agent")
        if len(set(ids)) != len(ids):
            raise ContractViolation(f"duplicate agent ids in {ids}")
        if self.scheduler_tag not in SCHEDULERS:
            raise ContractViolation(f"unknown scheduler tag {self.scheduler_tag!r}")

    def __len__(self) -> int:
        return len(self.agent_ids)

    def serialize(self) -> str:
        return " ".join(str(i) for i in self.agent_ids)


def alns_cap(n: int) -> int:
    """Largest ALNS neighborhood: ceil(n/2), but never below the initial size 2."""
    return min(n, max(2, math.ceil(n / 2)))


@dataclass
class SchedulerState:
    algo: str
    n_agents: int
    m: int
    rng: np.random.Generator
    n_lns_iterations: int = 8
    permutation: np.ndarray | None = None
    cursor: int = 0
    iteration: int = 0
    history: list[tuple[int, float]] = field(default_factory=list)
    improved: list[bool] = field(default_factory=list)
    best_metric: float = -math.inf
    size_list: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.algo not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.algo!r}; choose from {SCHEDULERS}")
        if not 1 <= self.m <= self.n_agents:
            raise ContractViolation(f"m={self.m} outside [1, {self.n_agents}]")
        if self.permutation is not None:
            perm = np.asarray(self.permutation, dtype=np.int64)
            if sorted(perm.tolist()) != list(range(self.n_agents)):
                raise ContractViolation("permutation must be a bijection on range(n)")
            self.permutation = perm


def make_scheduler(algo: str, n_agents: int, m: int | None = None, seed: int = 0,
                   n_lns_iterations: int = 8, permutation: Sequence[int] | None = None,
                   size_list: Sequence[int] | None = None) -> SchedulerState:
    """Build a scheduler state with the usual defaults.

    ``m`` defaults to n for ``full``, floor(n/2) for ``rlns``/``blns`` and 2
    (capped by n) for ``alns``, where it is only the starting size.
    """
    rng = np.random.default_rng(seed)
    if algo == "full":
        m = n_agents
    elif algo == "alns":
        if size_list is not None:
            size_list = tuple(int(s) for s in size_list)
            if any(s < 2 for s in size_list):
                raise ContractViolation("ALNS size lists must not contain sizes below 2")
            if list(size_list) != sorted(set(size_list)) or size_list[-1] > n_agents:
                raise ContractViolation("ALNS size list must be strictly increasing and <= n")
            m = size_list[0]
        else:
            m = min(2, n_agents)
    elif m is None:
        m = max(1, n_agents // 2)
    if algo == "blns" and permutation is None:
        permutation = rng.permutation(n_agents)
    return SchedulerState(algo=algo, n_agents=n_agents, m=m, rng=rng,
                          n_lns_iterations=n_lns_iterations, permutation=permutation,
                          size_list=size_list)


def select_full(state: SchedulerState, n: int) -> Neighborhood:
    return Neighborhood(tuple(range(n)), state.iteration, "full")


def select_rlns(state: SchedulerState, n: int, m: int, tag: str = "rlns") -> Neighborhood:
    """Uniform m-subset without replacement, reported in increasing id order."""
    if not 1 <= m <= n:
        raise ContractViolation(f"m={m} outside [1, {n}]")
    ids = np.sort(state.rng.choice(n, size=m, replace=False))
    return Neighborhood(tuple(ids.tolist()), state.iteration, tag)


def select_blns(state: SchedulerState, n: int, m: int) -> Neighborhood:
    """Next m entries of the cyclic permutation; the cursor advances by m mod n."""
    if not 1 <= m <= n:
        raise ContractViolation(f"m={m} outside [1, {n}]")
    perm = state.permutation if state.permutation is not None else np.arange(n)
    ids = tuple(int(perm[(state.cursor + k) % n]) for k in range(m))
    state.cursor = (state.cursor + m) % n
    return Neighborhood(ids, state.iteration, "blns")


def alns_next_size(m: int, n: int, improved: Sequence[bool]) -> int:
    """Grow m unless one of the last two LNS iterations improved.

    Growth: ``min(m + 2**(floor(log2 m) - 1), cap)``, cap = ceil(n/2) (>= 2).
    Fewer than two recorded iterations never trigger growth.
    """
    cap = alns_cap(n)
    if not 2 <= m <= cap:
        raise ContractViolation(f"ALNS size m={m} outside [2, {cap}]")
    last_two = list(improved)[-2:]
    if len(last_two) < 2 or any(last_two):
        return m
    return min(m + 2 ** (int(math.floor(math.log2(m))) - 1), cap)


def _next_listed_size(m: int, sizes: tuple[int, ...], improved: Sequence[bool]) -> int:
    last_two = list(improved)[-2:]
    if len(last_two) < 2 or any(last_two):
        return m
    k = sizes.index(m)
    return sizes[min(k + 1, len(sizes) - 1)]


def select_alns(state: SchedulerState, n: int) -> Neighborhood:
    """Possibly grow m from the recorded improvement flags, then draw an RLNS subset."""
    if state.size_list is not None:
        state.m = _next_listed_size(state.m, state.size_list, state.improved)
    else:
        state.m = alns_next_size(state.m, n, state.improved)
    return select_rlns(state, n, state.m, tag="alns")


def next_neighborhood(state: SchedulerState) -> Neighborhood:
    """Select the neighborhood for the next LNS iteration and advance the counter."""
    n = state.n_agents
    if state.algo == "full":
        hood = select_full(state, n)
    elif state.algo == "rlns":
        hood = select_rlns(state, n, state.m)
    elif state.algo == "blns":
        hood = select_blns(state, n, state.m)
    else:
        hood = select_alns(state, n)
    state.iteration += 1
    return hood


def record_evaluation(state: SchedulerState, metric: float) -> bool:
    """Log the metric of the LNS iteration just finished.

    The iteration counts as improved iff the metric strictly beats the best
    metric of every earlier iteration. Returns that flag.
    """
    metric = float(metric)
    if not math.isfinite(metric):
        raise ContractViolation(f"evaluation metric must be finite, got {metric}")
    improved = metric > state.best_metric
    state.history.append((len(state.history), metric))
    state.improved.append(improved)
    if improved:
        state.best_metric = metric
    return improved


def trainings_per_neighborhood(total_rounds: int, n_lns_iterations: int) -> list[int]:
    """Training rounds for each LNS iteration; the remainder goes to the last one."""
    if n_lns_iterations < 1:
        raise ValueError("need at least one LNS iteration")
    if total_rounds < n_lns_iterations:
        raise ValueError(f"{total_rounds} training rounds cannot fill "
                         f"{n_lns_iterations} LNS iterations")
    base = total_rounds // n_lns_iterations
    counts = [base] * n_lns_iterations
    counts[-1] += total_rounds - base * n_lns_iterations
    return counts


def filter_trajectories(trajs: Sequence[Trajectory], hood: Neighborhood,
                        spec: DecPomdpSpec) -> list[AgentTrajectory]:
    """Per-agent trajectories of the neighborhood agents only, global states intact."""
    bad = [i for i in hood.agent_ids if not 0 <= i < spec.n_agents]
    if bad:
        raise ContractViolation(f"agent ids {bad} outside [0, {spec.n_agents})")
    out = []
    for traj in trajs:
        parts = decompose(traj, spec)
        out.extend(parts[i] for i in hood.agent_ids)
    return out
