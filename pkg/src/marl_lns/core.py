"""Dec-POMDP types shared by environments, samplers and trainers.

A ``Trajectory`` stores the joint view of one episode. ``decompose`` splits it
into one ``AgentTrajectory`` per agent; every agent keeps the full global-state
and shared-reward sequences, only observations, actions and log-probabilities
are projected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class StructureError(ValueError):
    """Raised when a trajectory does not match the arity declared by its spec."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DecPomdpSpec:
    n_agents: int
    obs_dim: int
    global_state_dim: int
    n_actions: int
    gamma: float = 0.99
    episode_limit: int = 1

    def __post_init__(self):
        # n_agents=1 is accepted so single-agent fixtures can share the machinery.
        if self.n_agents < 1:
            raise ValueError(f"n_agents must be >= 1, got {self.n_agents}")
        if self.obs_dim < 1 or self.global_state_dim < 1:
            raise ValueError("obs_dim and global_state_dim must be >= 1")
        if self.n_actions < 2:
            raise ValueError(f"action cardinality must be >= 2, got {self.n_actions}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.episode_limit < 1:
            raise ValueError("episode_limit must be positive")


@dataclass(frozen=True)
class Transition:
    """One joint environment step.

    ``truncated`` marks a step that ended the episode only because the episode
    limit was hit; learners bootstrap such steps from the critic.
    """

    global_state: np.ndarray
    per_agent_obs: np.ndarray
    joint_action: np.ndarray
    reward: float
    done: bool
    per_agent_action_logprob: np.ndarray
    value_estimate: float = 0.0
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "global_state", _frozen(self.global_state))
        object.__setattr__(self, "per_agent_obs", _frozen(np.atleast_2d(self.per_agent_obs)))
        object.__setattr__(self, "joint_action", _frozen(self.joint_action, np.int64))
        object.__setattr__(
            self, "per_agent_action_logprob", _frozen(self.per_agent_action_logprob)
        )
        object.__setattr__(self, "reward", float(self.reward))
        object.__setattr__(self, "value_estimate", float(self.value_estimate))
        n = self.per_agent_obs.shape[0]
        if self.joint_action.shape != (n,) or self.per_agent_action_logprob.shape != (n,):
            raise StructureError(
                f"transition arity mismatch: {n} observations, "
                f"{self.joint_action.shape} actions, "
                f"{self.per_agent_action_logprob.shape} log-probs"
            )

    @property
    def n_agents(self) -> int:
        return self.per_agent_obs.shape[0]


@dataclass(frozen=True)
class Trajectory:
    transitions: tuple[Transition, ...]
    episode_return: float = field(default=float("nan"))

    def __post_init__(self):
        ts = tuple(self.transitions)
        object.__setattr__(self, "transitions", ts)
        for t in ts[:-1]:
            if t.done:
                raise StructureError("only the final transition may be terminal")
        if np.isnan(self.episode_return):
            object.__setattr__(self, "episode_return", float(sum(t.reward for t in ts)))

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions])

    @property
    def global_states(self) -> np.ndarray:
        return np.stack([t.global_state for t in self.transitions])

    def check(self, spec: DecPomdpSpec) -> None:
        if not self.transitions:
            raise StructureError("empty trajectory")
        if len(self.transitions) > spec.episode_limit:
            raise StructureError(
                f"trajectory length {len(self)} exceeds episode_limit {spec.episode_limit}"
            )
        for k, t in enumerate(self.transitions):
            if t.n_agents != spec.n_agents:
                raise StructureError(
                    f"step {k}: {t.n_agents} agents, spec declares {spec.n_agents}"
                )
            if t.per_agent_obs.shape[1] != spec.obs_dim:
                raise StructureError(f"step {k}: observation width {t.per_agent_obs.shape[1]}")
            if t.global_state.shape != (spec.global_state_dim,):
                raise StructureError(f"step {k}: global state shape {t.global_state.shape}")


@dataclass(frozen=True)
class AgentTrajectory:
    agent_id: int
    obs_seq: np.ndarray
    action_seq: np.ndarray
    logprob_seq: np.ndarray
    reward_seq: np.ndarray
    value_seq: np.ndarray
    done_seq: np.ndarray
    global_state_seq: np.ndarray
    truncated_seq: np.ndarray | None = None

    def __post_init__(self):
        for name in ("obs_seq", "logprob_seq", "reward_seq", "value_seq", "global_state_seq"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "action_seq", _frozen(self.action_seq, np.int64))
        object.__setattr__(self, "done_seq", _frozen(self.done_seq, bool))
        trunc = self.truncated_seq
        if trunc is None:
            trunc = np.zeros(len(self.done_seq), dtype=bool)
        object.__setattr__(self, "truncated_seq", _frozen(trunc, bool))
        lengths = {
            len(getattr(self, f))
            for f in (
                "obs_seq", "action_seq", "logprob_seq", "reward_seq",
                "value_seq", "done_seq", "global_state_seq", "truncated_seq",
            )
        }
        if len(lengths) != 1:
            raise StructureError(f"agent {self.agent_id}: misaligned sequences {lengths}")

    def __len__(self) -> int:
        return len(self.action_seq)


def decompose(traj: Trajectory, spec: DecPomdpSpec) -> list[AgentTrajectory]:
    """Split a joint trajectory into one per-agent trajectory for every agent."""
    traj.check(spec)
    ts = traj.transitions
    obs = np.stack([t.per_agent_obs for t in ts])  # (T, n, obs_dim)
    actions = np.stack([t.joint_action for t in ts])
    logps = np.stack([t.per_agent_action_logprob for t in ts])
    rewards = traj.rewards
    values = np.array([t.value_estimate for t in ts])
    dones = np.array([t.done for t in ts])
    truncs = np.array([t.truncated for t in ts])
    states = traj.global_states
    return [
        AgentTrajectory(
            agent_id=i,
            obs_seq=obs[:, i],
            action_seq=actions[:, i],
            logprob_seq=logps[:, i],
            reward_seq=rewards,
            value_seq=values,
            done_seq=dones,
            global_state_seq=states,
            truncated_seq=truncs,
        )
        for i in range(spec.n_agents)
    ]


def recompose(parts: Sequence[AgentTrajectory]) -> Trajectory:
    """Inverse of ``decompose`` given every agent's trajectory in id order."""
    parts = sorted(parts, key=lambda p: p.agent_id)
    if [p.agent_id for p in parts] != list(range(len(parts))):
        raise StructureError("recompose needs exactly one trajectory per agent id 0..n-1")
    first = parts[0]
    transitions = []
    for t in range(len(first)):
        transitions.append(
            Transition(
                global_state=first.global_state_seq[t],
                per_agent_obs=np.stack([p.obs_seq[t] for p in parts]),
                joint_action=np.array([p.action_seq[t] for p in parts]),
                reward=first.reward_seq[t],
                done=bool(first.done_seq[t]),
                per_agent_action_logprob=np.array([p.logprob_seq[t] for p in parts]),
                value_estimate=first.value_seq[t],
                truncated=bool(first.truncated_seq[t]),
            )
        )
    return Trajectory(tuple(transitions))


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    """Sum of ``gamma**t * r_t`` with zero-based t."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    total = 0.0
    for r in reversed(list(rewards)):
        total = float(r) + gamma * total
    return total
