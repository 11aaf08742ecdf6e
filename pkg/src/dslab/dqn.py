"""DQN with a cross-state correlation penalty on the last hidden layer.

The Q-network is split into a relu feature trunk phi(s) and a bias-free
linear head, Q(s, a) = phi(s) . w(a). The trunk descends the TD loss plus
lambda times the mean pair correlation; the head descends the TD loss only.
``algorithm="vanilla"`` pins lambda at zero, leaving plain DQN.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import nn, reprreg
from .checkpoint import FeatureCheckpoint
from .config import ExperimentConfig
from .envs import TaskSpec, make_env, probe_states
from .errors import ContractViolation, NonFiniteError
from .replay import Batch, ReplayBuffer
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

MOVING_AVERAGE_WINDOW = 10


class LinearHead:
    """Per-action weight rows w(a), shape (n_actions, n)."""

    def __init__(self, weight):
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        self.version = 0

    def params(self):
        return [self.weight]

    def copy(self):
        return LinearHead(self.weight.copy())


class QNetwork:
    def __init__(self, trunk: nn.DenseNet, head: LinearHead):
        if head.weight.shape[1] != trunk.output_dim:
            raise ContractViolation("head width must equal the trunk's feature dimension")
        self.trunk = trunk
        self.head = head

    @classmethod
    def init(cls, obs_dim, hidden_sizes, feature_dim, n_actions, rng):
        trunk = nn.DenseNet.init([obs_dim, *hidden_sizes, feature_dim], "relu", rng)
        bound = np.sqrt(6.0 / feature_dim)
        head = LinearHead(rng.uniform(-bound, bound, size=(n_actions, feature_dim)))
        return cls(trunk, head)

    @property
    def n_actions(self) -> int:
        return self.head.weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.trunk.output_dim

    def copy(self) -> "QNetwork":
        return QNetwork(self.trunk.copy(), self.head.copy())

    def composed(self) -> nn.DenseNet:
        """The whole Q-network as a single DenseNet (head as a zero-bias identity layer)."""
        layers = [nn.Layer(l.weight, l.bias, l.activation) for l in self.trunk.layers]
        layers.append(nn.Layer(self.head.weight, np.zeros(self.n_actions), "identity"))
        return nn.DenseNet(layers)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256(self.trunk.digest().encode())
        h.update(self.head.weight.tobytes())
        return h.hexdigest()


TargetNetwork = QNetwork


def q_values(net: QNetwork, s) -> np.ndarray:
    return nn.predict(net.trunk, s) @ net.head.weight.T


def select_action(net: QNetwork, s, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest action index."""
    if rng.random() < eps:
        return int(rng.integers(net.n_actions))
    return int(np.argmax(q_values(net, s)))


def td_targets(target_net: QNetwork, batch: Batch, gamma: float) -> np.ndarray:
    if not 0 <= gamma < 1:
        raise ContractViolation("gamma must lie in [0, 1)")
    best_next = q_values(target_net, batch.s_next).max(axis=1)
    return np.where(batch.terminal, batch.r, batch.r + gamma * best_next)


def td_loss(net: QNetwork, batch: Batch, targets: np.ndarray):
    """Mean squared TD error and its gradients. Returns ``(l1, trunk_grad, head_grad)``."""
    m = len(batch)
    phi, tape = nn.forward(net.trunk, batch.s)
    w = net.head.weight
    rows = np.arange(m)
    q = (phi @ w.T)[rows, batch.a]
    err = targets - q
    l1 = float(np.mean(err * err))
    dq = (-2.0 / m) * err
    dw = np.zeros_like(w)
    np.add.at(dw, batch.a, dq[:, None] * phi)
    dphi = dq[:, None] * w[batch.a]
    return l1, nn.backward(net.trunk, tape, dphi), nn.Gradient([dw])


@dataclass(frozen=True)
class LambdaSchedule:
    """lambda after e completed episodes is min(e * delta, lambda_max).

    Kept as a count so the trace is exact rather than an accumulated sum.
    """

    delta: float
    lambda_max: float
    episodes: int = 0

    def __post_init__(self):
        if self.delta < 0 or self.lambda_max < 0:
            raise ContractViolation("delta and lambda_max must be non-negative")

    @property
    def value(self) -> float:
        return min(self.episodes * self.delta, self.lambda_max)


def advance_lambda(schedule: LambdaSchedule) -> LambdaSchedule:
    return replace(schedule, episodes=schedule.episodes + 1)


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay from ``start`` to ``end`` over ``horizon`` ticks, then flat."""

    start: float
    end: float
    horizon: int

    def __post_init__(self):
        if not 0 <= self.end <= self.start <= 1:
            raise ContractViolation("need 0 <= end <= start <= 1")

    def value(self, t: int) -> float:
        if self.horizon <= 0 or t >= self.horizon:
            return self.end
        return self.start + (self.end - self.start) * (t / self.horizon)


def sync_target(net: QNetwork, target_net: QNetwork, step: int, every: int) -> QNetwork:
    if every < 1:
        raise ContractViolation("sync period must be >= 1")
    return net.copy() if step % every == 0 else target_net


@dataclass
class LossReport:
    l1: float
    l2: Optional[float]
    lam: float
    degenerate_pairs: int = 0


def composite_update(
    net: QNetwork,
    target_net: QNetwork,
    batch: Batch,
    pairs: Optional[reprreg.PairBatch],
    lam: float,
    opt_trunk: nn.OptimizerState,
    opt_head: nn.OptimizerState,
    gamma: float,
) -> LossReport:
    """One gradient step on L1 + lam * L2 for the trunk and L1 for the head.

    The correlation term is always evaluated when ``pairs`` is given (it is
    logged) but only differentiated when ``lam > 0``.
    """
    y = td_targets(target_net, batch, gamma)
    l1, g_trunk, g_head = td_loss(net, batch, y)
    l2, degenerate = None, 0
    if pairs is not None and len(pairs):
        l2, g2, degenerate = reprreg.l2_loss(net.trunk, pairs, with_grad=lam > 0)
        if lam > 0:
            g_trunk = g_trunk.scaled_add(g2, lam)
    if not np.isfinite(l1) or (l2 is not None and not np.isfinite(l2)):
        raise NonFiniteError(f"non-finite loss (l1={l1}, l2={l2})")
    nn.apply_update(net.trunk, g_trunk, opt_trunk)
    nn.apply_update(net.head, g_head, opt_head)
    return LossReport(l1, l2, lam, degenerate)


@dataclass
class EpisodeRecord:
    episode: int
    ret: float
    moving_avg_return: float
    length: int
    l1: Optional[float]
    l2: Optional[float]
    lam: float
    mean_pair_corr: float
    epsilon: float
    steps: int


TRAINING_LOG_COLUMNS = (
    "episode", "return", "moving_avg_return", "episode_length", "l1", "l2",
    "lambda", "mean_pair_corr", "epsilon", "steps",
)


def log_rows(records):
    for r in records:
        yield (r.episode, r.ret, r.moving_avg_return, r.length, r.l1, r.l2, r.lam,
               r.mean_pair_corr, r.epsilon, r.steps)


class TrainingAborted(NonFiniteError):
    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


@dataclass
class TrainingResult:
    checkpoint: FeatureCheckpoint
    log: list
    network: QNetwork
    probe_states: np.ndarray
    final_corr: float
    selection_episode: int = -1
    metadata: dict = field(default_factory=dict)


class _PairSource:
    """Supplies correlation pairs each update using its own rng stream."""

    def __init__(self, cfg: ExperimentConfig, env, buf: ReplayBuffer, rng):
        self.cfg = cfg
        self.buf = buf
        self.rng = rng
        self.model = None
        self.index = None
        self.enumerable = env.all_states() if hasattr(env, "all_states") else None
        if cfg.clusters > 0 and self.enumerable is not None:
            self._fit(self.enumerable)

    def _fit(self, pool):
        k = min(self.cfg.clusters, len(np.unique(pool, axis=0)))
        if k < 2:
            return
        self.model = reprreg.kmeans_fit(pool, k, self.cfg.kmeans_iters, self.rng)
        if self.index is None:
            self.index = reprreg.ClusterIndex(self.model, self.buf)
        else:
            self.index.rebuild(self.model, self.buf)

    def pushed(self, slot, state):
        if self.index is not None:
            self.index.update(slot, state)

    def end_of_episode(self, episode):
        cfg = self.cfg
        if cfg.clusters <= 0:
            return
        if self.model is None:
            if len(self.buf) >= cfg.kmeans_warmup:
                self._fit(self._pool())
        elif (episode + 1) % cfg.kmeans_refresh == 0:
            self._fit(self.enumerable if self.enumerable is not None else self._pool())

    def _pool(self):
        states = self.buf.states()
        if len(states) > self.cfg.kmeans_pool:
            states = states[self.rng.choice(len(states), self.cfg.kmeans_pool, replace=False)]
        return states

    def sample(self):
        if self.model is not None:
            return reprreg.sample_pairs_clustered(self.model, self.buf, self.rng, self.index)
        return reprreg.sample_pairs_uniform(self.buf, self.cfg.pair_count, self.rng)


def train(
    task: TaskSpec,
    cfg: ExperimentConfig,
    seed: Optional[int] = None,
    *,
    on_episode: Optional[Callable[[int, QNetwork], None]] = None,
) -> TrainingResult:
    """Run DS-DQN (or vanilla DQN) on ``task``.

    The returned checkpoint holds the trunk from the episode with the best
    10-episode moving-average return (latest on ties).
    """
    seed = cfg.seed if seed is None else seed
    env = make_env(task)
    vanilla = cfg.algorithm == "vanilla"
    net = QNetwork.init(env.obs_dim, cfg.hidden_sizes, cfg.feature_dim, env.n_actions, rng_for(seed, "init"))
    target = net.copy()
    opt_trunk = nn.adam(cfg.alpha)
    opt_head = nn.adam(cfg.beta)
    act_rng = rng_for(seed, "act")
    replay_rng = rng_for(seed, "replay")
    buf = ReplayBuffer(cfg.buffer_capacity, env.obs_dim, env.n_actions)
    pairs = _PairSource(cfg, env, buf, rng_for(seed, "regularizer"))
    probes = probe_states(task, cfg.probe_count, derive_seed(seed, "probe"))
    schedule = LambdaSchedule(0.0 if vanilla else cfg.lambda_delta, 0.0 if vanilla else cfg.lambda_max)
    eps = EpsilonSchedule(cfg.eps_start, cfg.eps_end, cfg.eps_decay_steps)
    warmup = max(cfg.learning_starts, cfg.batch_size)

    records: list[EpisodeRecord] = []
    returns: list[float] = []
    best_trunk, best_ma, best_episode = net.trunk.copy(), -np.inf, -1
    step = 0
    for episode in range(cfg.train_episodes):
        s = env.reset(derive_seed(seed, "episode", episode))
        lam = schedule.value
        ret, l1s, l2s = 0.0, [], []
        length = 0
        for length in range(1, cfg.episode_steps + 1):
            a = select_action(net, s, eps.value(step), act_rng)
            res = env.step(a)
            slot = buf.push(s, a, res.reward, res.next_observation, res.terminal)
            pairs.pushed(slot, s)
            step += 1
            ret += res.reward
            if len(buf) >= warmup:
                batch = buf.sample_batch(cfg.batch_size, replay_rng)
                try:
                    rep = composite_update(net, target, batch, pairs.sample(), lam, opt_trunk, opt_head, cfg.gamma)
                except NonFiniteError as exc:
                    log.error("training aborted at episode %d step %d: %s", episode, step, exc)
                    raise TrainingAborted(str(exc), records) from exc
                l1s.append(rep.l1)
                if rep.l2 is not None:
                    l2s.append(rep.l2)
            target = sync_target(net, target, step, cfg.target_sync)
            s = res.next_observation
            if res.terminal:
                break
        schedule = advance_lambda(schedule)
        pairs.end_of_episode(episode)
        returns.append(ret)
        ma = float(np.mean(returns[-MOVING_AVERAGE_WINDOW:]))
        corr, _ = reprreg.mean_pair_correlation(net.trunk, probes)
        records.append(
            EpisodeRecord(
                episode, ret, ma, length,
                float(np.mean(l1s)) if l1s else None,
                float(np.mean(l2s)) if l2s else None,
                lam, corr, eps.value(step), step,
            )
        )
        if ma >= best_ma:
            best_trunk, best_ma, best_episode = net.trunk.copy(), ma, episode
        if on_episode is not None:
            on_episode(episode, net)

    final_corr, _ = reprreg.mean_pair_correlation(net.trunk, probes)
    meta = {
        "env_id": task.env_id,
        "algorithm": cfg.algorithm,
        "feature_dim": cfg.feature_dim,
        "seed": int(seed),
        "selection_episode": best_episode,
        "selection_moving_avg_return": None if best_episode < 0 else best_ma,
        "final_mean_pair_corr": final_corr,
    }
    return TrainingResult(
        FeatureCheckpoint(best_trunk, meta), records, net, probes, final_corr, best_episode, meta
    )
