"""Run configuration: INI-style files, defaults and seed derivation."""

from __future__ import annotations

import ast
import configparser
import os
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from ..envs import ENV_REGISTRY
from ..lns import SCHEDULERS
from ..mappo import PpoConfig

CONFIG_ENV_VAR = "MARL_LNS_CONFIG"
PROTOCOLS = ("median_final_ten", "mean_100")
MASK64 = (1 << 64) - 1

# Independent RNG streams derived from the master seed.
STREAM_ENV, STREAM_SCHEDULER, STREAM_INIT, STREAM_SAMPLE, STREAM_EVAL, STREAM_UPDATE = range(1, 7)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, stream: int, index: int = 0) -> int:
    """Seed for ``(stream, index)``: splitmix64 chained over master, stream and index."""
    return splitmix64(splitmix64(splitmix64(master & MASK64) ^ stream) ^ index)


@dataclass
class RunConfig:
    env_id: str = "team_spread"
    n_agents: int = 4
    env_params: dict = field(default_factory=dict)
    scheduler: str = "full"
    m: int | None = None
    n_lns_iterations: int = 8
    total_env_steps: int = 128_000
    num_envs: int = 8
    buffer_length: int = 400
    seed: int = 0
    eval_episodes: int = 32
    eval_protocol: str = "median_final_ten"
    eval_every_update: bool = False
    blns_permutation: str = "random"
    alns_sizes: tuple[int, ...] | None = None
    output: str | None = None
    ppo: PpoConfig = field(default_factory=PpoConfig)

    def __post_init__(self):
        if self.env_id not in ENV_REGISTRY:
            raise ValueError(f"unknown environment {self.env_id!r}; choose from {sorted(ENV_REGISTRY)}")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.scheduler!r}; choose from {SCHEDULERS}")
        if self.eval_protocol not in PROTOCOLS:
            raise ValueError(f"unknown evaluation protocol {self.eval_protocol!r}")
        if self.blns_permutation not in ("random", "identity"):
            raise ValueError("blns_permutation must be 'random' or 'identity'")
        if self.m is not None and not 1 <= self.m <= self.n_agents:
            raise ValueError(f"m={self.m} outside [1, {self.n_agents}]")
        if self.num_envs < 1 or self.buffer_length < 1:
            raise ValueError("num_envs and buffer_length must be positive")
        if self.total_env_steps % self.steps_per_round:
            raise ValueError(
                f"total_env_steps={self.total_env_steps} is not a whole number of sampling "
                f"phases of num_envs*buffer_length={self.steps_per_round} steps"
            )
        if self.rounds < self.n_lns_iterations:
            raise ValueError(f"{self.rounds} training rounds cannot cover "
                             f"{self.n_lns_iterations} LNS iterations")

    @property
    def steps_per_round(self) -> int:
        return self.num_envs * self.buffer_length

    @property
    def rounds(self) -> int:
        return self.total_env_steps // self.steps_per_round

    def seed_for(self, stream: int, index: int = 0) -> int:
        return derive_seed(self.seed, stream, index)

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)


_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"env_params", "ppo"}
_PPO_KEYS = {f.name for f in fields(PpoConfig)}


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def default_config_text() -> str:
    return resources.files("marl_lns").joinpath("default.ini").read_text()


def load_config(path: str | os.PathLike | None = None, **overrides) -> RunConfig:
    """Read ``[run]``, ``[env]`` and ``[ppo]`` sections; keyword overrides win.

    With no path, ``$MARL_LNS_CONFIG`` is used when set, else the shipped defaults.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_string(default_config_text())
    path = path or os.environ.get(CONFIG_ENV_VAR)
    if path:
        if not Path(path).exists():
            raise FileNotFoundError(f"config file not found: {path}")
        parser.read(path)
    run = {k: _parse_value(v) for k, v in parser["run"].items()}
    unknown = set(run) - _RUN_KEYS
    if unknown:
        raise ValueError(f"unknown [run] keys: {sorted(unknown)}")
    ppo = {k: _parse_value(v) for k, v in parser["ppo"].items()} if parser.has_section("ppo") else {}
    unknown = set(ppo) - _PPO_KEYS
    if unknown:
        raise ValueError(f"unknown [ppo] keys: {sorted(unknown)}")
    env_params = {k: _parse_value(v) for k, v in parser["env"].items()} if parser.has_section("env") else {}
    ppo_over = overrides.pop("ppo", None)
    run.update({k: v for k, v in overrides.items() if v is not None})
    if "alns_sizes" in run and run["alns_sizes"] is not None:
        run["alns_sizes"] = tuple(run["alns_sizes"])
    ppo_cfg = PpoConfig(**ppo) if ppo_over is None else ppo_over
    return RunConfig(env_params=env_params, ppo=ppo_cfg, **run)


def dump_config(cfg: RunConfig) -> str:
    """Serialize a config back to the INI layout ``load_config`` reads."""
    parser = configparser.ConfigParser()
    parser["run"] = {k: repr(getattr(cfg, k)) if not isinstance(getattr(cfg, k), str)
                     else getattr(cfg, k) for k in sorted(_RUN_KEYS)}
    parser["env"] = {k: repr(v) for k, v in cfg.env_params.items()}
    parser["ppo"] = {f.name: repr(getattr(cfg.ppo, f.name)) for f in fields(PpoConfig)}
    from io import StringIO
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
