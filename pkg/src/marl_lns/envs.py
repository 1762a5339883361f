"""Desk-scale cooperative environments.

All environments share one step interface: ``reset(seed=None)`` returns
``(obs, state)`` with ``obs`` shaped ``(n_agents, obs_dim)`` and ``step`` returns
a ``StepResult``. Global state is the concatenation of every agent's
observation in agent-index order followed by any environment-private state.

Observation layouts
-------------------
team_spread
    ``[own_x, own_y, l0_x, l0_y, ..., l{n-1}_x, l{n-1}_y]`` (integer grid
    coordinates stored as floats). Other agents' positions are not observed.
climb_game, gaussian_squeeze
    a single constant ``0.0`` per agent; both games are stateless.
"""

from __future__ import annotations

import itertools
from typing import NamedTuple, Sequence

import numpy as np

from .core import DecPomdpSpec

MAX_ENUMERATION = 10**6


class StepResult(NamedTuple):
    obs: np.ndarray
    state: np.ndarray
    reward: float
    done: bool
    truncated: bool = False


class ContractViolation(ValueError):
    pass


def _check_actions(joint_action, n_agents: int, n_actions: int) -> np.ndarray:
    a = np.asarray(joint_action)
    if a.shape != (n_agents,):
        raise ContractViolation(f"expected {n_agents} actions, got shape {a.shape}")
    if not np.issubdtype(a.dtype, np.integer):
        if not np.all(np.equal(np.mod(a, 1), 0)):
            raise ContractViolation(f"non-integer action in {a}")
        a = a.astype(np.int64)
    if np.any(a < 0) or np.any(a >= n_actions):
        raise ContractViolation(f"action out of range [0, {n_actions}): {a.tolist()}")
    return a


class TeamSpreadEnv:
    """Gridworld where n agents must jointly cover n landmarks.

    Actions: 0 stay, 1 up (+y), 2 down (-y), 3 left (-x), 4 right (+x); moves
    are clipped to the grid. Reward is minus the mean, over landmarks, of the
    Manhattan distance to the nearest agent; covering every landmark adds a
    bonus of 1 and ends the episode.
    """

    MOVES = np.array([[0, 0], [0, 1], [0, -1], [-1, 0], [1, 0]], dtype=np.int64)

    def __init__(self, n_agents: int = 4, grid_size: int = 7, episode_limit: int = 50,
                 gamma: float = 0.99, seed: int | None = None):
        if n_agents < 2:
            raise ValueError("team_spread needs at least 2 agents")
        if grid_size * grid_size < n_agents:
            raise ValueError("grid too small for one landmark per agent")
        self.n_agents = n_agents
        self.grid_size = grid_size
        self.episode_limit = episode_limit
        self.n_actions = 5
        self.spec = DecPomdpSpec(
            n_agents=n_agents,
            obs_dim=2 + 2 * n_agents,
            global_state_dim=n_agents * (2 + 2 * n_agents),
            n_actions=5,
            gamma=gamma,
            episode_limit=episode_limit,
        )
        self._rng = np.random.default_rng(seed)
        self.agent_positions = np.zeros((n_agents, 2), dtype=np.int64)
        self.landmark_positions = np.zeros((n_agents, 2), dtype=np.int64)
        self.step_count = 0

    def reset(self, seed: int | None = None):
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        g = self.grid_size
        cells = self._rng.choice(g * g, size=self.n_agents, replace=False)
        self.landmark_positions = np.stack([cells % g, cells // g], axis=1)
        self.agent_positions = self._rng.integers(0, g, size=(self.n_agents, 2))
        self.step_count = 0
        return self._observe()

    def set_positions(self, agents, landmarks) -> tuple[np.ndarray, np.ndarray]:
        """Place agents and landmarks explicitly (tests and scripted scenarios)."""
        agents = np.asarray(agents, dtype=np.int64).reshape(self.n_agents, 2)
        landmarks = np.asarray(landmarks, dtype=np.int64).reshape(self.n_agents, 2)
        for p in (agents, landmarks):
            if np.any(p < 0) or np.any(p >= self.grid_size):
                raise ContractViolation("position outside the grid")
        self.agent_positions = agents.copy()
        self.landmark_positions = landmarks.copy()
        self.step_count = 0
        return self._observe()

    def _observe(self):
        lm = self.landmark_positions.reshape(-1).astype(np.float64)
        obs = np.empty((self.n_agents, self.spec.obs_dim))
        obs[:, :2] = self.agent_positions
        obs[:, 2:] = lm
        return obs, obs.reshape(-1).copy()

    def distances(self) -> np.ndarray:
        """Manhattan distance matrix, shape (landmarks, agents)."""
        diff = self.landmark_positions[:, None, :] - self.agent_positions[None, :, :]
        return np.abs(diff).sum(axis=2)

    def shaped_reward(self) -> float:
        return -float(self.distances().min(axis=1).sum()) / self.n_agents

    def step(self, joint_action) -> StepResult:
        a = _check_actions(joint_action, self.n_agents, self.n_actions)
        self.agent_positions = np.clip(
            self.agent_positions + self.MOVES[a], 0, self.grid_size - 1
        )
        self.step_count += 1
        mins = self.distances().min(axis=1)
        reward = -float(mins.sum()) / self.n_agents
        covered = bool(np.all(mins == 0))
        if covered:
            reward += 1.0
        truncated = not covered and self.step_count >= self.episode_limit
        obs, state = self._observe()
        return StepResult(obs, state, reward, covered or truncated, truncated)


def default_climb_payoff(n_agents: int) -> np.ndarray:
    """Climb-style payoff: coordinated 0/1/2 pays 11/7/5, mixing 0 and 1 pays -2, else 0."""
    payoff = np.zeros((3,) * n_agents)
    for joint in itertools.product(range(3), repeat=n_agents):
        s = set(joint)
        if len(s) == 1:
            payoff[joint] = (11.0, 7.0, 5.0)[joint[0]]
        elif 0 in s and 1 in s:
            payoff[joint] = -2.0
    return payoff


class ClimbGameEnv:
    """One-shot coordination game over 3 actions per agent with a unique optimum."""

    def __init__(self, n_agents: int = 2, payoff=None, seed: int | None = None):
        if n_agents < 2:
            raise ValueError("climb_game needs at least 2 agents")
        payoff = default_climb_payoff(n_agents) if payoff is None else np.asarray(payoff, float)
        if payoff.shape != (3,) * n_agents:
            raise ValueError(f"payoff must have shape {(3,) * n_agents}, got {payoff.shape}")
        if np.sum(payoff == payoff.max()) != 1:
            raise ValueError("payoff maximum must be unique")
        self.payoff = payoff
        self.n_agents = n_agents
        self.n_actions = 3
        self.episode_limit = 1
        self.spec = DecPomdpSpec(n_agents, 1, n_agents, 3, gamma=0.99, episode_limit=1)
        self.step_count = 0

    def reset(self, seed: int | None = None):
        self.step_count = 0
        return np.zeros((self.n_agents, 1)), np.zeros(self.n_agents)

    def step(self, joint_action) -> StepResult:
        a = _check_actions(joint_action, self.n_agents, self.n_actions)
        self.step_count += 1
        return StepResult(
            np.zeros((self.n_agents, 1)), np.zeros(self.n_agents),
            float(self.payoff[tuple(a)]), True, False,
        )

    def joint_reward(self, joint_action) -> float:
        return float(self.payoff[tuple(joint_action)])


class GaussianSqueezeEnv:
    """Multi-mode Gaussian squeeze.

    Each agent contributes ``a_i`` in 0..9 weighted by ``u_i``; with
    ``x = sum(u_i * a_i)`` the shared reward is
    ``sum_k x * exp(-(x - mu_k)**2 / sigma_k**2)``. Every agent's choice moves x,
    so no proper subset of agents can reach the high mode on its own.
    """

    def __init__(self, n_agents: int = 10, unit_weights: Sequence[float] | None = None,
                 modes: Sequence[tuple[float, float]] | None = None, seed: int | None = None):
        if n_agents < 1:
            raise ValueError("gaussian_squeeze needs at least one agent")
        if unit_weights is None:
            unit_weights = [(i + 1) / n_agents for i in range(n_agents)]
        u = np.asarray(unit_weights, dtype=np.float64)
        if u.shape != (n_agents,) or np.any(u <= 0) or np.any(u > 1):
            raise ValueError("unit weights must be n_agents values in (0, 1]")
        if modes is None:
            top = float(u.sum()) * 9
            modes = [(0.25 * top, 1.0), (0.75 * top, 2.0)]
        self.unit_weights = u
        self.modes = [(float(mu), float(sigma)) for mu, sigma in modes]
        self.n_agents = n_agents
        self.n_actions = 10
        self.episode_limit = 1
        self.spec = DecPomdpSpec(n_agents, 1, n_agents, 10, gamma=0.99, episode_limit=1)
        self.step_count = 0

    def reward_of(self, x: float) -> float:
        return float(sum(x * np.exp(-((x - mu) ** 2) / sigma**2) for mu, sigma in self.modes))

    def joint_reward(self, joint_action) -> float:
        return self.reward_of(float(np.dot(self.unit_weights, joint_action)))

    def reset(self, seed: int | None = None):
        self.step_count = 0
        return np.zeros((self.n_agents, 1)), np.zeros(self.n_agents)

    def step(self, joint_action) -> StepResult:
        a = _check_actions(joint_action, self.n_agents, self.n_actions)
        self.step_count += 1
        return StepResult(
            np.zeros((self.n_agents, 1)), np.zeros(self.n_agents),
            self.joint_reward(a), True, False,
        )


def brute_force_optimum(env) -> tuple[tuple[int, ...], float]:
    """Exact argmax of a one-shot game by enumeration.

    Ties resolve to the lexicographically smallest joint action.
    """
    size = env.n_actions**env.n_agents
    if size > MAX_ENUMERATION:
        raise ContractViolation(
            f"joint action space has {size} entries, above the {MAX_ENUMERATION} limit"
        )
    best_joint, best_value = None, -np.inf
    for joint in itertools.product(range(env.n_actions), repeat=env.n_agents):
        v = env.joint_reward(joint)
        if v > best_value:
            best_joint, best_value = joint, v
    return best_joint, float(best_value)


ENV_REGISTRY = {
    "team_spread": TeamSpreadEnv,
    "climb_game": ClimbGameEnv,
    "gaussian_squeeze": GaussianSqueezeEnv,
}


def make_env(env_id: str, n_agents: int, seed: int | None = None, **params):
    try:
        cls = ENV_REGISTRY[env_id]
    except KeyError:
        raise ValueError(
            f"unknown environment {env_id!r}; choose from {sorted(ENV_REGISTRY)}"
        ) from None
    return cls(n_agents=n_agents, seed=seed, **params)
