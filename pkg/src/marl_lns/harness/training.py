"""Training orchestration: lockstep sampling, evaluation and the LNS outer loop."""

from __future__ import annotations

import copy
import json
import statistics
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..envs import make_env
from ..lns import Neighborhood, make_scheduler, next_neighborhood, record_evaluation, \
    trainings_per_neighborhood
from ..mappo import ActorCritic, PhaseBatch, RolloutBuffer, TrainingDiverged, TrainStats, update
from .config import (STREAM_ENV, STREAM_EVAL, STREAM_INIT, STREAM_SAMPLE, STREAM_SCHEDULER,
                     STREAM_UPDATE, RunConfig)


class Sampler:
    """Steps ``num_envs`` environment instances in lockstep with one batched policy call.

    Each instance is owned exclusively by the sampler and keeps its own RNG;
    the policy is only read during a phase.
    """

    def __init__(self, envs, policy: ActorCritic, rng: np.random.Generator):
        self.envs = list(envs)
        self.policy = policy
        self.rng = rng
        first = [env.reset() for env in self.envs]
        self.obs = np.stack([o for o, _ in first])
        self.states = np.stack([s for _, s in first])
        self.episode_returns: list[float] = []
        self._running = np.zeros(len(self.envs))

    def collect(self, buffer_length: int) -> PhaseBatch:
        T, E = buffer_length, len(self.envs)
        n, od = self.obs.shape[1:]
        sd = self.states.shape[1]
        obs = np.empty((T, E, n, od))
        states = np.empty((T, E, sd))
        actions = np.empty((T, E, n), dtype=np.int64)
        logprobs = np.empty((T, E, n))
        rewards = np.empty((T, E))
        values = np.empty((T, E))
        dones = np.zeros((T, E), dtype=bool)
        truncated = np.zeros((T, E), dtype=bool)
        bootstrap = np.zeros((T, E))
        for t in range(T):
            obs[t], states[t] = self.obs, self.states
            a, lp = self.policy.act(self.obs, self.rng)
            actions[t], logprobs[t] = a, lp
            values[t] = self.policy.value(self.states)
            final_states = []
            for e, env in enumerate(self.envs):
                res = env.step(a[e])
                rewards[t, e] = res.reward
                dones[t, e] = res.done
                truncated[t, e] = res.truncated
                self._running[e] += res.reward
                if res.done:
                    if res.truncated:
                        final_states.append(res.state)
                    self.episode_returns.append(float(self._running[e]))
                    self._running[e] = 0.0
                    self.obs[e], self.states[e] = env.reset()
                else:
                    self.obs[e], self.states[e] = res.obs, res.state
            if final_states:
                bootstrap[t, truncated[t]] = self.policy.value(np.stack(final_states))
        last_values = self.policy.value(self.states)
        return PhaseBatch(obs, states, actions, logprobs, rewards, values, dones,
                          truncated, bootstrap, last_values)


class UniformPolicy:
    """Picks every action with equal probability (untrained baseline)."""

    def __init__(self, n_actions: int):
        self.n_actions = n_actions

    def act(self, obs, rng=None, greedy: bool = False):
        obs = np.asarray(obs)
        shape = obs.shape[:-1]
        if greedy:
            return np.zeros(shape, dtype=np.int64), np.full(shape, -np.log(self.n_actions))
        return rng.integers(0, self.n_actions, size=shape), np.full(shape, -np.log(self.n_actions))


PROTOCOL_EPISODES = {"median_final_ten": 32, "mean_100": 100}


def evaluate(policy, env, protocol: str = "median_final_ten", episodes: int | None = None,
             greedy: bool = True, seed: int = 0, rng: np.random.Generator | None = None) -> float:
    """Mean undiscounted episode return over a batch of evaluation episodes.

    Episodes run in lockstep on private copies of ``env``; episode i is reset
    with seed ``seed + i`` so repeated evaluations see the same start states.
    ``episodes`` defaults to 32 for ``median_final_ten`` and 100 for ``mean_100``.
    """
    if protocol not in PROTOCOL_EPISODES:
        raise ValueError(f"unknown evaluation protocol {protocol!r}")
    k = episodes or PROTOCOL_EPISODES[protocol]
    if not greedy and rng is None:
        rng = np.random.default_rng(seed)
    envs = [copy.deepcopy(env) for _ in range(k)]
    obs = np.stack([e.reset(seed=seed + i)[0] for i, e in enumerate(envs)])
    returns = np.zeros(k)
    live = np.ones(k, dtype=bool)
    while live.any():
        idx = np.flatnonzero(live)
        a, _ = policy.act(obs[idx], rng, greedy=greedy)
        for j, i in enumerate(idx):
            res = envs[i].step(a[j])
            returns[i] += res.reward
            if res.done:
                live[i] = False
            else:
                obs[i] = res.obs
    return float(returns.mean())


class EvalWindow:
    """Rolling window of the last ``size`` evaluations; the final metric is its median."""

    def __init__(self, size: int = 10):
        self.values: deque[float] = deque(maxlen=size)

    def push(self, value: float) -> None:
        self.values.append(float(value))

    def median(self) -> float:
        if not self.values:
            raise ValueError("no evaluations recorded")
        return float(statistics.median(self.values))


@dataclass
class MetricsRow:
    lns_iteration: int
    m: int
    neighborhood: str
    env_steps: int
    eval_metric: float
    sampling_time_s: float
    updating_time_s: float
    cumulative_wall_s: float


@dataclass
class RunMetrics:
    rows: list[MetricsRow] = field(default_factory=list)
    train_stats: list[TrainStats] = field(default_factory=list)
    eval_history: list[float] = field(default_factory=list)
    final_metric: float = float("nan")
    env_steps: int = 0
    n_updates: int = 0
    config: RunConfig | None = None
    policy: ActorCritic | None = field(default=None, repr=False, compare=False)

    @property
    def neighborhoods(self) -> list[tuple[int, ...]]:
        return [tuple(int(i) for i in r.neighborhood.split()) for r in self.rows]

    @property
    def sampling_time_s(self) -> float:
        return sum(r.sampling_time_s for r in self.rows)

    @property
    def updating_time_s(self) -> float:
        return sum(r.updating_time_s for r in self.rows)

    @property
    def wall_time_s(self) -> float:
        return self.rows[-1].cumulative_wall_s if self.rows else 0.0


def _build(config: RunConfig):
    envs = [make_env(config.env_id, config.n_agents, seed=config.seed_for(STREAM_ENV, i),
                     **config.env_params) for i in range(config.num_envs)]
    spec = envs[0].spec
    ac = ActorCritic(spec.obs_dim, spec.global_state_dim, spec.n_agents, spec.n_actions,
                     config.ppo, np.random.default_rng(config.seed_for(STREAM_INIT)))
    sampler = Sampler(envs, ac, np.random.default_rng(config.seed_for(STREAM_SAMPLE)))
    eval_env = make_env(config.env_id, config.n_agents, seed=0, **config.env_params)
    update_rng = np.random.default_rng(config.seed_for(STREAM_UPDATE))
    return ac, sampler, eval_env, update_rng


def _set_lr(ac: ActorCritic, config: RunConfig, done_updates: int) -> None:
    if config.ppo.lr_decay:
        lr = config.ppo.lr * (1.0 - done_updates / config.rounds)
        ac.actor_opt.lr = ac.critic_opt.lr = lr


def _dump_divergence(config: RunConfig, err: TrainingDiverged, context: dict) -> Path:
    target = Path(config.output + ".diverged.json") if config.output else Path("diverged.json")
    payload = {"error": str(err), "stats": err.stats, **context,
               "config": {k: v for k, v in asdict(config).items()}}
    target.write_text(json.dumps(payload, indent=2, default=str))
    return target


def train(config: RunConfig) -> RunMetrics:
    """Run the LNS outer loop and return per-iteration metrics.

    Each LNS iteration selects a neighborhood, then alternates sampling one
    ``num_envs * buffer_length`` phase and updating on the neighborhood's
    slice of it, evaluates the greedy policy and reports the metric back to
    the scheduler.
    """
    ac, sampler, eval_env, update_rng = _build(config)
    sched = make_scheduler(
        config.scheduler, config.n_agents, m=config.m,
        seed=config.seed_for(STREAM_SCHEDULER), n_lns_iterations=config.n_lns_iterations,
        permutation=(range(config.n_agents) if config.blns_permutation == "identity" else None),
        size_list=config.alns_sizes,
    )
    eval_seed = config.seed_for(STREAM_EVAL) % (2**31)
    episodes = config.eval_episodes if config.eval_protocol == "median_final_ten" else 100
    window = EvalWindow()
    metrics = RunMetrics(config=config, policy=ac)
    buffer = RolloutBuffer(config.buffer_length, config.num_envs, range(config.n_agents))

    def run_eval() -> float:
        value = evaluate(ac, eval_env, config.eval_protocol, episodes=episodes, seed=eval_seed)
        window.push(value)
        metrics.eval_history.append(value)
        return value

    start = time.perf_counter()
    for it, rounds in enumerate(trainings_per_neighborhood(config.rounds, config.n_lns_iterations)):
        hood: Neighborhood = next_neighborhood(sched)
        buffer.reset(hood.agent_ids)
        t_sample = t_update = 0.0
        for _ in range(rounds):
            t0 = time.perf_counter()
            phase = sampler.collect(config.buffer_length)
            buffer.store(phase)
            t1 = time.perf_counter()
            _set_lr(ac, config, metrics.n_updates)
            try:
                stats = update(buffer, ac, config.ppo, update_rng)
            except TrainingDiverged as err:
                path = _dump_divergence(config, err, {"lns_iteration": it,
                                                      "neighborhood": hood.agent_ids,
                                                      "update": metrics.n_updates})
                raise TrainingDiverged(f"{err} (diagnostics written to {path})", err.stats) from err
            t2 = time.perf_counter()
            t_sample += t1 - t0
            t_update += t2 - t1
            metrics.train_stats.append(stats)
            metrics.n_updates += 1
            metrics.env_steps += phase.n_steps
            if config.eval_every_update:
                metric = run_eval()
        if not config.eval_every_update:
            metric = run_eval()
        record_evaluation(sched, metric)
        metrics.rows.append(MetricsRow(
            lns_iteration=it, m=len(hood), neighborhood=hood.serialize(),
            env_steps=metrics.env_steps, eval_metric=metric,
            sampling_time_s=t_sample, updating_time_s=t_update,
            cumulative_wall_s=time.perf_counter() - start,
        ))
    if config.eval_protocol == "median_final_ten":
        metrics.final_metric = window.median()
    else:
        metrics.final_metric = metrics.eval_history[-1]
    return metrics


def train_plain_mappo(config: RunConfig, n_updates: int | None = None) -> list[TrainStats]:
    """Reference MAPPO loop with no neighborhoods, filtering or scheduler.

    Uses the same seed streams as ``train`` so a ``full`` run can be compared
    against it update by update.
    """
    ac, sampler, _, update_rng = _build(config)
    buffer = RolloutBuffer(config.buffer_length, config.num_envs, range(config.n_agents))
    out = []
    for u in range(config.rounds if n_updates is None else n_updates):
        buffer.store(sampler.collect(config.buffer_length))
        _set_lr(ac, config, u)
        out.append(update(buffer, ac, config.ppo, update_rng))
    return out


def greedy_joint_action(policy: ActorCritic, env) -> tuple[int, ...]:
    """Greedy joint action at the first state of ``env`` (one-shot games)."""
    obs, _ = env.reset(seed=0)
    a, _ = policy.act(obs, greedy=True)
    return tuple(int(x) for x in a)
