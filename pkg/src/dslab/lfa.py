"""Linear Q-learning on a frozen feature map.

Q(s, a) = phi(s) . w(a); after each transition only the taken action's row
moves, by alpha * delta * phi(s). ``phi`` is either a transferred trunk or
the raw observation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .checkpoint import FeatureCheckpoint
from .config import ExperimentConfig
from .dqn import EpsilonSchedule
from .envs import TaskSpec, make_env, observation_dim
from .errors import ConfigError, ContractViolation, DivergenceError
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)


class TrunkFeatures:
    """phi(s) from a frozen trunk, memoised per observation."""

    def __init__(self, source, obs_dim: int | None = None, cache_size: int = 200_000):
        trunk = source.trunk if isinstance(source, FeatureCheckpoint) else source
        if obs_dim is not None and trunk.input_dim != obs_dim:
            raise ConfigError(
                "checkpoint", f"trunk expects {trunk.input_dim}-dim observations, environment gives {obs_dim}"
            )
        self.trunk = trunk
        self.dim = trunk.output_dim
        self.cache_size = cache_size
        self._cache: dict[bytes, np.ndarray] = {}

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        key = s.tobytes()
        phi = self._cache.get(key)
        if phi is None:
            if len(self._cache) >= self.cache_size:
                self._cache.clear()
            phi = nn.predict(self.trunk, s)
            phi.setflags(write=False)
            self._cache[key] = phi
        return phi


class RawFeatures:
    def __init__(self, dim: int):
        self.dim = dim

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (self.dim,):
            raise ContractViolation(f"raw observation must have shape ({self.dim},)")
        return s


class OneHotFeatures:
    """Indicator features from a state-index function; makes LFA tabular."""

    def __init__(self, index_of, size: int):
        self.index_of = index_of
        self.dim = size

    def __call__(self, s) -> np.ndarray:
        phi = np.zeros(self.dim)
        phi[self.index_of(s)] = 1.0
        return phi


def featurize(source, s) -> np.ndarray:
    return source(s)


class LinearQ:
    def __init__(self, n_actions: int, dim: int):
        self.weights = np.zeros((n_actions, dim))

    def q(self, phi) -> np.ndarray:
        return self.weights @ phi


def lfa_update(q: LinearQ, phi_s, a, r, phi_next, terminal, alpha, gamma, *, step=None) -> float:
    """Apply one semi-gradient Q-learning step in place and return the TD error."""
    if not alpha > 0 or not 0 <= gamma < 1:
        raise ContractViolation("need alpha > 0 and 0 <= gamma < 1")
    w = q.weights
    target = r if terminal else r + gamma * float(np.max(w @ phi_next))
    delta = target - float(w[a] @ phi_s)
    if not np.isfinite(delta):
        raise DivergenceError(
            f"TD error became {delta} at step {step}", step=step, weight_norm=float(np.linalg.norm(w))
        )
    w[a] += (alpha * delta) * phi_s
    return delta


@dataclass(frozen=True)
class ExitCondition:
    metric: str = "moving_avg_return"
    window: int = 50
    threshold: float = 0.0
    direction: str = ">="

    def __post_init__(self):
        if self.window < 1:
            raise ContractViolation("exit window must be >= 1")
        if self.metric not in ("moving_avg_return", "moving_avg_length"):
            raise ContractViolation(f"unknown exit metric {self.metric!r}")
        if self.direction not in (">=", "<="):
            raise ContractViolation(f"unknown direction {self.direction!r}")

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "ExitCondition":
        return cls(cfg.exit_metric, cfg.exit_window, cfg.exit_threshold, cfg.exit_direction)

    def is_met(self, returns, lengths) -> bool:
        """Moving average over a full window of completed episodes."""
        series = returns if self.metric == "moving_avg_return" else lengths
        if len(series) < self.window:
            return False
        avg = float(np.mean(series[-self.window:]))
        return avg >= self.threshold if self.direction == ">=" else avg <= self.threshold


@dataclass
class TransferResult:
    episodes_to_exit: int
    exited: bool
    diverged: bool
    returns: list = field(default_factory=list)
    lengths: list = field(default_factory=list)

    def log_rows(self, run_id):
        last = len(self.returns) - 1
        for ep, (ret, length) in enumerate(zip(self.returns, self.lengths)):
            yield (run_id, ep, ret, length, int(self.exited and ep == last))


def run_transfer(features, task: TaskSpec, exit: ExitCondition, cfg: ExperimentConfig, seed: int) -> TransferResult:
    """LFA Q-learning until ``exit`` holds or ``cfg.lfa_max_episodes`` episodes pass.

    Returns the 0-based index of the episode after which the exit condition
    first held, or the episode cap when it never did (or the weights diverged).
    """
    env = make_env(task)
    if features.dim < 1:
        raise ConfigError("checkpoint", "feature dimension must be positive")
    if isinstance(features, (TrunkFeatures, RawFeatures)):
        expected = features.trunk.input_dim if isinstance(features, TrunkFeatures) else features.dim
        if expected != observation_dim(task.env_id):
            raise ConfigError(
                "checkpoint", f"features expect {expected}-dim observations, {task.env_id} gives {env.obs_dim}"
            )
    q = LinearQ(env.n_actions, features.dim)
    eps = EpsilonSchedule(cfg.lfa_eps_start, cfg.lfa_eps_end, cfg.lfa_eps_decay_episodes)
    rng = rng_for(seed, "lfa-act")
    cap = cfg.lfa_max_episodes
    alpha, gamma = cfg.lfa_alpha, cfg.gamma
    n_actions = env.n_actions
    returns, lengths = [], []
    step = 0
    for episode in range(cap):
        s = env.reset(derive_seed(seed, "lfa-episode", episode))
        phi = features(s)
        e = eps.value(episode)
        ret, length = 0.0, 0
        try:
            for length in range(1, cfg.episode_steps + 1):
                if rng.random() < e:
                    a = int(rng.integers(n_actions))
                else:
                    a = int(np.argmax(q.weights @ phi))
                res = env.step(a)
                phi_next = features(res.next_observation)
                lfa_update(q, phi, a, res.reward, phi_next, res.terminal, alpha, gamma, step=step)
                step += 1
                ret += res.reward
                phi = phi_next
                if res.terminal:
                    break
        except DivergenceError as exc:
            log.warning("LFA run diverged in episode %d: %s", episode, exc)
            returns.append(ret)
            lengths.append(length)
            return TransferResult(cap, False, True, returns, lengths)
        returns.append(ret)
        lengths.append(length)
        if exit.is_met(returns, lengths):
            return TransferResult(episode, True, False, returns, lengths)
    return TransferResult(cap, False, False, returns, lengths)
