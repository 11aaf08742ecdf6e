"""Experiment configuration: one flat JSON document, per-environment defaults."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .envs import ENV_IDS, EPISODE_STEP_CAPS, TaskSpec
from .errors import ConfigError


@dataclass(frozen=True)
class ExperimentConfig:
    env_id: str = "gridworld"
    algorithm: str = "dsdqn"  # or "vanilla" (lambda pinned at 0)
    seed: int = 0
    goal_sigma: float = 0.05

    # network: obs -> hidden_sizes... -> feature_dim (all relu), then a linear head
    hidden_sizes: tuple = (64,)
    feature_dim: int = 64

    # DQN
    alpha: float = 1e-3  # trunk learning rate
    beta: float = 1e-3  # head learning rate
    gamma: float = 0.99
    batch_size: int = 32
    target_sync: int = 500
    buffer_capacity: int = 50_000
    learning_starts: int = 1000
    train_episodes: int = 500
    max_episode_steps: int = 0  # 0 selects the environment's cap
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 20_000

    # correlation regularizer
    lambda_max: float = 0.01
    lambda_delta: float = 2e-4
    clusters: int = 25  # 0 selects uniform pair sampling
    pairs: int = 0  # uniform sampler pair count; 0 means batch_size
    kmeans_warmup: int = 5000
    kmeans_refresh: int = 100
    kmeans_iters: int = 50
    kmeans_pool: int = 5000
    probe_count: int = 64

    # LFA transfer
    lfa_alpha: float = 1e-2
    lfa_eps_start: float = 0.3
    lfa_eps_end: float = 0.01
    lfa_eps_decay_episodes: int = 200
    lfa_max_episodes: int = 10_000
    exit_metric: str = "moving_avg_return"
    exit_window: int = 50
    exit_threshold: float = 8.0
    exit_direction: str = ">="

    # protocol
    trials: int = 5
    runs: int = 10

    @property
    def task(self) -> TaskSpec:
        return TaskSpec(self.env_id, self.goal_sigma, self.seed)

    @property
    def episode_steps(self) -> int:
        return self.max_episode_steps or EPISODE_STEP_CAPS[self.env_id]

    @property
    def pair_count(self) -> int:
        return self.pairs or self.batch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    def with_overrides(self, **kw) -> "ExperimentConfig":
        cfg = replace(self, **kw)
        validate(cfg)
        return cfg


ENV_DEFAULTS = {
    "gridworld": dict(
        buffer_capacity=10_000,
        learning_starts=64,
        target_sync=100,
        train_episodes=300,
        eps_decay_steps=3000,
        clusters=4,
        lambda_max=0.2,
        lambda_delta=0.01,
        lfa_max_episodes=2000,
        exit_metric="moving_avg_length",
        exit_threshold=7.0,
        exit_direction="<=",
    ),
    "mountaincar": dict(
        train_episodes=300,
        lfa_max_episodes=5000,
        exit_threshold=-200.0,
    ),
    "minibreakout": dict(
        train_episodes=1500,
        lfa_max_episodes=10_000,
        exit_threshold=8.0,
    ),
}

_POSITIVE = (
    "alpha", "beta", "lfa_alpha", "batch_size", "target_sync", "buffer_capacity",
    "feature_dim", "trials", "runs", "exit_window", "kmeans_iters", "kmeans_pool",
    "lfa_max_episodes", "probe_count", "kmeans_refresh",
)
_NON_NEGATIVE = (
    "lambda_max", "lambda_delta", "clusters", "pairs", "goal_sigma", "learning_starts",
    "train_episodes", "max_episode_steps", "eps_decay_steps", "lfa_eps_decay_episodes",
    "kmeans_warmup",
)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.env_id not in ENV_IDS:
        raise ConfigError("env_id", f"must be one of {ENV_IDS}")
    if cfg.algorithm not in ("dsdqn", "vanilla"):
        raise ConfigError("algorithm", "must be 'dsdqn' or 'vanilla'")
    for name in _POSITIVE:
        if not getattr(cfg, name) > 0:
            raise ConfigError(name, f"must be positive, got {getattr(cfg, name)!r}")
    for name in _NON_NEGATIVE:
        if not getattr(cfg, name) >= 0:
            raise ConfigError(name, f"must be non-negative, got {getattr(cfg, name)!r}")
    if not 0 <= cfg.gamma < 1:
        raise ConfigError("gamma", "must lie in [0, 1)")
    for lo, hi in (("eps_end", "eps_start"), ("lfa_eps_end", "lfa_eps_start")):
        if not 0 <= getattr(cfg, lo) <= getattr(cfg, hi) <= 1:
            raise ConfigError(hi, f"need 0 <= {lo} <= {hi} <= 1")
    if any(int(h) < 1 for h in cfg.hidden_sizes):
        raise ConfigError("hidden_sizes", "widths must be positive")
    if cfg.exit_metric not in ("moving_avg_return", "moving_avg_length"):
        raise ConfigError("exit_metric", "must be moving_avg_return or moving_avg_length")
    if cfg.exit_direction not in (">=", "<="):
        raise ConfigError("exit_direction", "must be '>=' or '<='")
    return cfg


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def default_config(env_id: str = "gridworld", **overrides) -> ExperimentConfig:
    if env_id not in ENV_IDS:
        raise ConfigError("env_id", f"must be one of {ENV_IDS}")
    return config_from_dict({"env_id": env_id, **overrides})


def config_from_dict(doc: dict) -> ExperimentConfig:
    unknown = sorted(set(doc) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration field")
    env_id = doc.get("env_id", "gridworld")
    if env_id not in ENV_IDS:
        raise ConfigError("env_id", f"must be one of {ENV_IDS}")
    merged = {**ENV_DEFAULTS[env_id], **doc}
    if "hidden_sizes" in merged:
        hs = merged["hidden_sizes"]
        if not isinstance(hs, (list, tuple)):
            raise ConfigError("hidden_sizes", "must be a list of widths")
        merged["hidden_sizes"] = tuple(hs)
    for key, value in merged.items():
        default = getattr(ExperimentConfig, key, None)
        if isinstance(default, bool) or key == "hidden_sizes":
            continue
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(key, f"expected a number, got {value!r}")
            if isinstance(default, int) and not isinstance(default, bool) and float(value) != int(value):
                raise ConfigError(key, f"expected an integer, got {value!r}")
            merged[key] = type(default)(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
    return validate(ExperimentConfig(**merged))


def load_config(path=None, **overrides) -> ExperimentConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config", "top level must be a JSON object")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(doc)
