"""MAPPO low-level trainer: shared actor, centralized critic, clipped PPO.

The actor is one parameter set shared by all agents; each row of its input is
an agent's normalized observation followed by a one-hot agent id. The critic
sees only the global state, so its input width is fixed by the environment
and never by how many agents are being trained.
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .nn import AdamState, Mlp, adam_step, clip_grad_norm


class TrainingDiverged(FloatingPointError):
    """A loss or statistic became non-finite during an update."""

    def __init__(self, message: str, stats: dict | None = None):
        super().__init__(message)
        self.stats = stats or {}


class SmallBatchWarning(UserWarning):
    pass


@dataclass
class PpoConfig:
    clip_eps: float = 0.2          # MAPPO reference default
    gae_lambda: float = 0.95
    gamma: float = 0.99
    huber_delta: float = 10.0
    ppo_epochs: int = 5            # MAPPO reference default
    num_minibatch: int = 1
    value_loss_coef: float = 1.0
    entropy_coef: float = 0.01
    lr: float = 5e-4
    adam_eps: float = 1e-5
    weight_decay: float = 0.0
    max_grad_norm: float = 10.0
    hidden_sizes: tuple[int, ...] = (64, 64, 64)
    use_reward_norm: bool = True
    use_feature_norm: bool = True
    lr_decay: bool = False

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        for name in ("gae_lambda", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.ppo_epochs < 1 or self.num_minibatch < 1:
            raise ValueError("ppo_epochs and num_minibatch must be >= 1")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)


class RunningNormalizer:
    """Per-dimension running mean/variance (parallel Welford merge)."""

    def __init__(self, shape=(), clip: float = 10.0, eps: float = 1e-8):
        self.mean = np.zeros(shape)
        self.var = np.ones(shape)
        self.count = 0.0
        self.clip = clip
        self.eps = eps

    def update(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=np.float64)
        n = batch.shape[0]
        if n == 0:
            return
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_var, float(n)
            return
        total = self.count + n
        delta = b_mean - self.mean
        self.mean = self.mean + delta * n / total
        m2 = self.var * self.count + b_var * n + delta**2 * self.count * n / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x: np.ndarray) -> np.ndarray:
        out = (x - self.mean) / np.sqrt(self.var + self.eps)
        return np.clip(out, -self.clip, self.clip)

    def state(self) -> dict:
        return {"mean": np.copy(self.mean), "var": np.copy(self.var), "count": self.count}


class RewardScaler:
    """Divides rewards by their running root-mean-square; never shifts them.

    Using the raw second moment instead of the centered variance keeps the
    scale well defined for constant rewards (variance zero).
    """

    def __init__(self, floor: float = 1e-8):
        self.sq_mean = 0.0
        self.count = 0.0
        self.floor = floor

    def update(self, rewards: np.ndarray) -> None:
        r = np.asarray(rewards, dtype=np.float64).reshape(-1)
        if r.size == 0:
            return
        total = self.count + r.size
        self.sq_mean += (float(np.mean(r * r)) - self.sq_mean) * r.size / total
        self.count = total

    @property
    def scale(self) -> float:
        if self.count == 0:
            return 1.0
        return max(float(np.sqrt(self.sq_mean)), self.floor)

    def normalize(self, r: np.ndarray) -> np.ndarray:
        return np.asarray(r, dtype=np.float64) / self.scale


def compute_gae(rewards, values, bootstrap_value, dones, gamma: float, lam: float):
    """Generalized advantage estimation.

    Arrays are time-major; extra trailing axes (e.g. parallel environments)
    are processed together. ``values[t]`` is V(s_t), ``bootstrap_value`` is
    V(s_T) for the state following the last step. A step with ``dones[t]``
    true cuts both the bootstrap and the recursion.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    if r.shape != v.shape or r.shape != d.shape:
        raise ValueError(f"misaligned inputs: rewards {r.shape}, values {v.shape}, dones {d.shape}")
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lambda must lie in [0, 1]")
    T = r.shape[0]
    adv = np.zeros_like(r)
    next_value = np.broadcast_to(np.asarray(bootstrap_value, dtype=np.float64), r.shape[1:])
    next_adv = np.zeros(r.shape[1:])
    for t in range(T - 1, -1, -1):
        mask = 1.0 - d[t]
        delta = r[t] + gamma * next_value * mask - v[t]
        next_adv = delta + gamma * lam * mask * next_adv
        adv[t] = next_adv
        next_value = v[t]
    return adv, adv + v


def normalize_advantages(advantages, std_floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(advantages, dtype=np.float64)
    if a.size < 2:
        warnings.warn("advantage batch of size < 2 left unnormalized", SmallBatchWarning)
        return a.copy()
    return (a - a.mean()) / max(float(a.std()), std_floor)


def ppo_policy_loss(new_logprob, old_logprob, advantage, clip_eps: float) -> float:
    """Mean of ``-min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)``."""
    return float(np.mean(_policy_terms(new_logprob, old_logprob, advantage, clip_eps)[0]))


def _policy_terms(new_logprob, old_logprob, advantage, clip_eps):
    new = np.asarray(new_logprob, dtype=np.float64)
    adv = np.asarray(advantage, dtype=np.float64)
    with np.errstate(over="ignore"):
        ratio = np.exp(new - np.asarray(old_logprob, dtype=np.float64))
    if not np.all(np.isfinite(ratio)):
        raise TrainingDiverged("non-finite importance ratio")
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    loss = -np.minimum(unclipped, clipped)
    # d loss / d new_logprob; the clipped branch is flat outside [1-eps, 1+eps].
    inside = (ratio > 1.0 - clip_eps) & (ratio < 1.0 + clip_eps)
    grad = np.where(unclipped <= clipped, -unclipped, np.where(inside, -clipped, 0.0))
    return loss, grad, ratio


def huber(x, delta: float):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))


def huber_grad(x, delta: float):
    x = np.asarray(x, dtype=np.float64)
    return np.clip(x, -delta, delta)


def value_loss(value, old_value, target_return, clip_eps: float, huber_delta: float) -> float:
    """Mean of the larger Huber loss between the raw and the clipped value."""
    return float(np.mean(_value_terms(value, old_value, target_return, clip_eps, huber_delta)[0]))


def _value_terms(value, old_value, target, clip_eps, delta):
    v = np.asarray(value, dtype=np.float64)
    old = np.asarray(old_value, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    diff = v - old
    v_clip = old + np.clip(diff, -clip_eps, clip_eps)
    e1, e2 = v - tgt, v_clip - tgt
    l1, l2 = huber(e1, delta), huber(e2, delta)
    inside = np.abs(diff) < clip_eps
    grad = np.where(l1 >= l2, huber_grad(e1, delta),
                    np.where(inside, huber_grad(e2, delta), 0.0))
    return np.maximum(l1, l2), grad


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class ActorCritic:
    """Parameter-shared policy plus centralized value function."""

    def __init__(self, obs_dim: int, state_dim: int, n_agents: int, n_actions: int,
                 config: PpoConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config or PpoConfig()
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = list(self.config.hidden_sizes)
        self.obs_dim, self.state_dim = obs_dim, state_dim
        self.n_agents, self.n_actions = n_agents, n_actions
        self.actor = Mlp([obs_dim + n_agents, *hidden, n_actions], rng, output_gain=0.01)
        self.critic = Mlp([state_dim, *hidden, 1], rng, output_gain=1.0)
        self.obs_norm = RunningNormalizer(obs_dim)
        self.state_norm = RunningNormalizer(state_dim)
        self.reward_scaler = RewardScaler()
        cfg = self.config
        self.actor_opt = AdamState(lr=cfg.lr, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
        self.critic_opt = AdamState(lr=cfg.lr, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)

    def actor_input(self, obs: np.ndarray, agent_ids: np.ndarray) -> np.ndarray:
        """Rows of ``[normalized obs, one-hot agent id]``; ``obs`` is (B, obs_dim)."""
        if self.config.use_feature_norm:
            obs = self.obs_norm.normalize(obs)
        x = np.zeros((obs.shape[0], self.obs_dim + self.n_agents))
        x[:, : self.obs_dim] = obs
        x[np.arange(obs.shape[0]), self.obs_dim + np.asarray(agent_ids)] = 1.0
        return x

    def critic_input(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        return self.state_norm.normalize(states) if self.config.use_feature_norm else states

    def logits(self, obs: np.ndarray) -> np.ndarray:
        """Logits for every agent; ``obs`` is (E, n, obs_dim) -> (E, n, n_actions)."""
        E, n, _ = obs.shape
        ids = np.tile(np.arange(n), E)
        return self.actor(self.actor_input(obs.reshape(E * n, -1), ids)).reshape(E, n, -1)

    def act(self, obs: np.ndarray, rng: np.random.Generator | None = None, greedy: bool = False):
        """Sample (or argmax) joint actions; returns ``(actions, logprobs)`` each (E, n)."""
        obs = np.asarray(obs, dtype=np.float64)
        squeeze = obs.ndim == 2
        if squeeze:
            obs = obs[None]
        logp_all = log_softmax(self.logits(obs).reshape(-1, self.n_actions))
        if greedy:
            actions = logp_all.argmax(axis=1)
        else:
            cdf = np.cumsum(np.exp(logp_all), axis=1)
            u = rng.random(cdf.shape[0]) * cdf[:, -1]
            actions = np.minimum((cdf <= u[:, None]).sum(axis=1), self.n_actions - 1)
        logp = logp_all[np.arange(len(actions)), actions]
        shape = obs.shape[:2]
        actions, logp = actions.reshape(shape), logp.reshape(shape)
        if squeeze:
            return actions[0], logp[0]
        return actions, logp

    def value(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        return self.critic(self.critic_input(states))[:, 0]

    def nets(self) -> dict[str, Mlp]:
        return {"actor": self.actor, "critic": self.critic}


@dataclass
class PhaseBatch:
    """One sampling phase in time-major layout.

    obs (T, E, n, obs_dim); states (T, E, state_dim); actions, logprobs
    (T, E, n); rewards, values, dones, bootstrap (T, E); last_values (E,).
    ``bootstrap`` holds V(s_final) for steps cut by the episode limit.
    """

    obs: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    logprobs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    truncated: np.ndarray
    bootstrap: np.ndarray
    last_values: np.ndarray

    @property
    def n_steps(self) -> int:
        return int(self.rewards.size)


class RolloutBuffer:
    """Per-agent transition storage for the agents of one neighborhood.

    Entries are kept time-major as (T, E, m); ``len(buffer)`` is T*E*m.
    """

    def __init__(self, buffer_length: int, num_envs: int, agent_ids):
        self.buffer_length = buffer_length
        self.num_envs = num_envs
        self.agent_ids = np.asarray(agent_ids, dtype=np.int64)
        self.capacity = buffer_length * num_envs * len(self.agent_ids)
        self._lock = threading.Lock()
        self.clear()

    def clear(self) -> None:
        self.phase: PhaseBatch | None = None
        self.obs = self.actions = self.logprobs = None
        self.advantages = self.returns = None

    def reset(self, agent_ids) -> None:
        """Clear and retarget the buffer to a new neighborhood."""
        self.agent_ids = np.asarray(agent_ids, dtype=np.int64)
        self.capacity = self.buffer_length * self.num_envs * len(self.agent_ids)
        self.clear()

    def __len__(self) -> int:
        return 0 if self.actions is None else int(self.actions.size)

    @property
    def full(self) -> bool:
        return len(self) == self.capacity

    def store(self, phase: PhaseBatch) -> None:
        """Keep only the neighborhood agents' slices of a sampling phase."""
        with self._lock:
            if self.actions is not None:
                raise RuntimeError("buffer already holds a phase; clear it first")
            T, E = phase.rewards.shape
            if (T, E) != (self.buffer_length, self.num_envs):
                raise ValueError(f"phase shape {(T, E)} does not match buffer "
                                 f"{(self.buffer_length, self.num_envs)}")
            ids = self.agent_ids
            self.phase = phase
            self.obs = phase.obs[:, :, ids]
            self.actions = phase.actions[:, :, ids]
            self.logprobs = phase.logprobs[:, :, ids]

    def compute_returns(self, ac: ActorCritic, config: PpoConfig) -> None:
        """Reward scaling and GAE for the stored phase (shared by all agents)."""
        p = self.phase
        if config.use_reward_norm:
            ac.reward_scaler.update(p.rewards)
            rewards = ac.reward_scaler.normalize(p.rewards)
        else:
            rewards = p.rewards
        rewards = rewards + config.gamma * p.bootstrap * p.truncated
        adv, ret = compute_gae(rewards, p.values, p.last_values, p.dones,
                               config.gamma, config.gae_lambda)
        self.advantages, self.returns = adv, ret

    def flat(self) -> dict[str, np.ndarray]:
        """Flatten to T*E*m rows, agent axis fastest."""
        if self.advantages is None:
            raise RuntimeError("compute_returns must run before flat()")
        T, E, m = self.actions.shape
        expand = lambda a: np.repeat(a.reshape(T * E), m)
        return {
            "obs": self.obs.reshape(T * E * m, -1),
            "agent_ids": np.tile(self.agent_ids, T * E),
            "state_index": np.repeat(np.arange(T * E), m),
            "states": self.phase.states.reshape(T * E, -1),
            "actions": self.actions.reshape(-1),
            "old_logprobs": self.logprobs.reshape(-1),
            "old_values": expand(self.phase.values),
            "advantages": expand(self.advantages),
            "returns": expand(self.returns),
        }


@dataclass
class TrainStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    grad_norm: float = 0.0
    value_grad_norm: float = 0.0
    clip_fraction: float = 0.0
    batch_size: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Minibatch:
    actor_x: np.ndarray
    critic_x: np.ndarray
    actions: np.ndarray
    old_logprobs: np.ndarray
    old_values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def take(self, idx: np.ndarray) -> "Minibatch":
        return Minibatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def minibatch_losses(ac: ActorCritic, mb: Minibatch, config: PpoConfig, grads: bool = True):
    """Actor and critic objectives for one minibatch, with analytic gradients.

    Actor objective: mean clipped surrogate minus ``entropy_coef`` * mean entropy.
    Critic objective: ``value_loss_coef`` * mean clipped Huber loss.
    """
    N = len(mb.actions)
    logits, a_cache = ac.actor.forward(mb.actor_x)
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    rows = np.arange(N)
    new_logp = logp_all[rows, mb.actions]
    pl, dpl, ratio = _policy_terms(new_logp, mb.old_logprobs, mb.advantages, config.clip_eps)
    ent = -(p * logp_all).sum(axis=1)

    v, c_cache = ac.critic.forward(mb.critic_x)
    v = v[:, 0]
    vl, dvl = _value_terms(v, mb.old_values, mb.returns, config.clip_eps, config.huber_delta)

    out = {
        "policy_loss": float(pl.mean()),
        "entropy": float(ent.mean()),
        "value_loss": float(vl.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > config.clip_eps)),
    }
    out["actor_loss"] = out["policy_loss"] - config.entropy_coef * out["entropy"]
    out["critic_loss"] = config.value_loss_coef * out["value_loss"]
    if not all(np.isfinite(v_) for v_ in out.values()):
        raise TrainingDiverged("non-finite loss", out)
    if not grads:
        return out

    # d/dlogits of the surrogate: dpl * (onehot - p); of entropy: -p (log p + H)
    g_logits = -p * dpl[:, None]
    g_logits[rows, mb.actions] += dpl
    g_ent = -p * (logp_all + ent[:, None])
    g_logits = (g_logits - config.entropy_coef * g_ent) / N
    out["actor_grads"], _ = ac.actor.backward(a_cache, g_logits)
    g_v = (config.value_loss_coef * dvl / N)[:, None]
    out["critic_grads"], _ = ac.critic.backward(c_cache, g_v)
    return out


def prepare_minibatch(ac: ActorCritic, buffer: RolloutBuffer) -> Minibatch:
    data = buffer.flat()
    states = data["states"][data["state_index"]]
    return Minibatch(
        actor_x=ac.actor_input(data["obs"], data["agent_ids"]),
        critic_x=ac.critic_input(states),
        actions=data["actions"],
        old_logprobs=data["old_logprobs"],
        old_values=data["old_values"],
        advantages=normalize_advantages(data["advantages"]),
        returns=data["returns"],
    )


def update(buffer: RolloutBuffer, ac: ActorCritic, config: PpoConfig | None = None,
           rng: np.random.Generator | None = None) -> TrainStats:
    """Run ``ppo_epochs`` passes of minibatch Adam steps over a full buffer, then clear it."""
    config = config or ac.config
    if len(buffer) == 0:
        raise ValueError("update called on an empty buffer")
    if not buffer.full:
        raise ValueError(f"buffer holds {len(buffer)} of {buffer.capacity} entries")
    if buffer.advantages is None:
        buffer.compute_returns(ac, config)
    batch = prepare_minibatch(ac, buffer)
    N = len(batch.actions)
    sums = TrainStats()
    steps = 0
    for _ in range(config.ppo_epochs):
        if config.num_minibatch > 1:
            order = rng.permutation(N)
            parts = np.array_split(order, config.num_minibatch)
        else:
            parts = [None]
        for idx in parts:
            mb = batch if idx is None else batch.take(idx)
            out = minibatch_losses(ac, mb, config)
            a_grads, a_norm = clip_grad_norm(out["actor_grads"], config.max_grad_norm)
            c_grads, c_norm = clip_grad_norm(out["critic_grads"], config.max_grad_norm)
            adam_step(ac.actor_opt, ac.actor.parameters(), a_grads,
                      list(ac.actor.named_parameters("actor.")))
            adam_step(ac.critic_opt, ac.critic.parameters(), c_grads,
                      list(ac.critic.named_parameters("critic.")))
            ac.actor.mark_updated()
            ac.critic.mark_updated()
            sums.policy_loss += out["policy_loss"]
            sums.value_loss += out["value_loss"]
            sums.entropy += out["entropy"]
            sums.clip_fraction += out["clip_fraction"]
            sums.grad_norm += a_norm
            sums.value_grad_norm += c_norm
            steps += 1
    stats = TrainStats(
        policy_loss=sums.policy_loss / steps,
        value_loss=sums.value_loss / steps,
        entropy=sums.entropy / steps,
        grad_norm=sums.grad_norm / steps,
        value_grad_norm=sums.value_grad_norm / steps,
        clip_fraction=sums.clip_fraction / steps,
        batch_size=N,
    )
    if not all(np.isfinite(v) for v in asdict(stats).values()):
        raise TrainingDiverged("non-finite training statistics", stats.as_dict())
    if config.use_feature_norm:
        ac.obs_norm.update(buffer.obs.reshape(-1, ac.obs_dim))
        ac.state_norm.update(buffer.phase.states.reshape(-1, ac.state_dim))
    buffer.clear()
    return stats
