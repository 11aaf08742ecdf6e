"""Cross-state feature correlation: the regularizer and its pair samplers.

The penalty is the mean Pearson correlation between the feature vectors of
two different states, r(phi(s_a), phi(s_b)), where each vector is centred
over its own n components. Pairs come either from uniform draws over the
replay buffer or from one representative per k-means cluster of raw states.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import nn
from .errors import ContractViolation, DegenerateInputError, NotReadyError

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if x.ndim != 1 or x.shape != y.shape:
        raise ContractViolation("pearson needs two vectors of equal length")
    if n < 2:
        raise ContractViolation("pearson needs at least two components")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx / n < VARIANCE_FLOOR or syy / n < VARIANCE_FLOOR:
        return 0.0
    return float(xc @ yc) / (np.sqrt(sxx) * np.sqrt(syy))


def pearson_grad(x, y):
    """Partial derivatives of :func:`pearson` w.r.t. both arguments.

    Zero where the degenerate-variance guard applies.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if n < 2 or x.shape != y.shape:
        raise ContractViolation("pearson_grad needs two vectors of equal length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx / n < VARIANCE_FLOOR or syy / n < VARIANCE_FLOOR:
        return np.zeros(n), np.zeros(n)
    norm = np.sqrt(sxx) * np.sqrt(syy)
    r = float(xc @ yc) / norm
    return yc / norm - r * xc / sxx, xc / norm - r * yc / syy


def pearson_rows(a: np.ndarray, b: np.ndarray, *, with_grad: bool = True):
    """Row-wise Pearson of two (l, n) arrays.

    Returns ``(r, da, db, degenerate)``; ``da``/``db`` are None when
    ``with_grad`` is false.
    """
    n = a.shape[1]
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    saa = np.einsum("ij,ij->i", ac, ac)
    sbb = np.einsum("ij,ij->i", bc, bc)
    sab = np.einsum("ij,ij->i", ac, bc)
    degenerate = (saa / n < VARIANCE_FLOOR) | (sbb / n < VARIANCE_FLOOR)
    ok = ~degenerate
    saa_safe = np.where(ok, saa, 1.0)
    sbb_safe = np.where(ok, sbb, 1.0)
    norm = np.sqrt(saa_safe) * np.sqrt(sbb_safe)
    r = np.where(ok, sab / norm, 0.0)
    if not with_grad:
        return r, None, None, degenerate
    da = bc / norm[:, None] - (r / saa_safe)[:, None] * ac
    db = ac / norm[:, None] - (r / sbb_safe)[:, None] * bc
    da[degenerate] = 0.0
    db[degenerate] = 0.0
    return r, da, db, degenerate


@dataclass(frozen=True)
class FeaturePair:
    s_a: np.ndarray
    s_b: np.ndarray


@dataclass
class PairBatch:
    """Pairs expressed as index pairs into a block of unique states."""

    states: np.ndarray
    left: np.ndarray
    right: np.ndarray

    def __len__(self):
        return len(self.left)

    def __iter__(self):
        for i, j in zip(self.left, self.right):
            yield FeaturePair(self.states[i], self.states[j])

    @classmethod
    def from_pairs(cls, pairs) -> "PairBatch":
        pairs = list(pairs)
        if not pairs:
            return cls(np.zeros((0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        states = np.array([s for p in pairs for s in (p.s_a, p.s_b)], dtype=np.float64)
        idx = np.arange(len(states))
        return cls(states, idx[0::2], idx[1::2])


def _as_pair_batch(pairs) -> PairBatch:
    return pairs if isinstance(pairs, PairBatch) else PairBatch.from_pairs(pairs)


def l2_loss(trunk: nn.DenseNet, pairs, *, with_grad: bool = True):
    """Mean pair correlation of trunk features and its trunk gradient.

    Returns ``(loss, Gradient or None, n_degenerate)``.
    """
    pb = _as_pair_batch(pairs)
    l = len(pb)
    if l == 0:
        raise ContractViolation("l2_loss needs at least one pair")
    if with_grad:
        phi, tape = nn.forward(trunk, pb.states)
    else:
        phi = nn.predict(trunk, pb.states)
    r, da, db, degenerate = pearson_rows(phi[pb.left], phi[pb.right], with_grad=with_grad)
    loss = float(r.mean())
    if not with_grad:
        return loss, None, int(degenerate.sum())
    dphi = np.zeros_like(phi)
    np.add.at(dphi, pb.left, da / l)
    np.add.at(dphi, pb.right, db / l)
    return loss, nn.backward(trunk, tape, dphi), int(degenerate.sum())


def mean_pair_correlation(trunk: nn.DenseNet, states, pairing: str = "all_pairs", *, k: int = 4, seed: int = 0):
    """Average correlation of features over a probe set.

    ``all_pairs`` uses every unordered pair; ``clustered`` fits k-means on the
    raw probe states and pairs the member nearest each centroid cyclically.
    Returns ``(mean, n_degenerate)``.
    """
    states = np.asarray(states, dtype=np.float64)
    if len(states) < 2:
        raise ContractViolation("need at least two probe states")
    if pairing == "all_pairs":
        left, right = map(np.array, zip(*combinations(range(len(states)), 2)))
    elif pairing == "clustered":
        n_distinct = len(np.unique(states, axis=0))
        model = kmeans_fit(states, min(k, n_distinct), rng=np.random.default_rng(seed))
        reps = model.representatives(states)
        left = np.array(reps)
        right = np.roll(left, -1)
    else:
        raise ContractViolation(f"unknown pairing {pairing!r}")
    phi = nn.predict(trunk, states)
    r, _, _, degenerate = pearson_rows(phi[left], phi[right], with_grad=False)
    return float(r.mean()), int(degenerate.sum())


def sample_pairs_uniform(buf, l: int, rng: np.random.Generator) -> PairBatch:
    """``2l`` independent uniform buffer states, paired consecutively."""
    if len(buf) == 0:
        raise NotReadyError("cannot sample pairs from an empty buffer")
    states = buf.sample_states(2 * l, rng)
    idx = np.arange(2 * l)
    return PairBatch(states, idx[0::2], idx[1::2])


# ---------------------------------------------------------------- k-means


def _sq_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    if x.shape[0] * c.shape[0] * x.shape[1] <= 2_000_000:
        diff = x[:, None, :] - c[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _inertia(x, c, labels) -> float:
    diff = x - c[labels]
    return float(np.einsum("ij,ij->", diff, diff))


@dataclass
class KMeansModel:
    centroids: np.ndarray
    inertia: float
    inertia_history: list = field(default_factory=list)
    iterations: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def assign(self, states) -> np.ndarray:
        """Nearest centroid per row, lowest index on ties."""
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return np.argmin(_sq_distances(x, self.centroids), axis=1)

    def representatives(self, states) -> list[int]:
        """Index of the member closest to each non-empty cluster's centroid."""
        x = np.asarray(states, dtype=np.float64)
        d = _sq_distances(x, self.centroids)
        labels = np.argmin(d, axis=1)
        reps = []
        for c in range(self.k):
            members = np.flatnonzero(labels == c)
            if members.size:
                reps.append(int(members[np.argmin(d[members, c])]))
        return reps


def _plusplus_init(x, k, rng):
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = _sq_distances(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise DegenerateInputError("ran out of distinct points during seeding")
        nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_distances(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def _lloyd(x, centroids, iters):
    labels = np.argmin(_sq_distances(x, centroids), axis=1)
    history = [_inertia(x, centroids, labels)]
    it = 0
    for it in range(1, iters + 1):
        new = centroids.copy()
        for c in range(len(centroids)):
            members = labels == c
            if members.any():
                new[c] = x[members].mean(axis=0)
        new_labels = np.argmin(_sq_distances(x, new), axis=1)
        centroids = new
        history.append(_inertia(x, centroids, new_labels))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return centroids, labels, history, it


def _hartigan(x, centroids, labels, history):
    """Single-point transfers that lower inertia, until none is left.

    Lloyd stops at any assignment fixpoint; this pass also escapes the ones
    where moving one point (with both centroids updated) still helps.
    """
    k = len(centroids)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    centroids = centroids.copy()
    moved = True
    while moved:
        moved = False
        for i in range(len(x)):
            a = labels[i]
            if counts[a] <= 1:
                continue
            d = ((centroids - x[i]) ** 2).sum(axis=1)
            gain = counts[a] / (counts[a] - 1) * d[a]
            cost = counts / (counts + 1) * d
            cost[a] = np.inf
            b = int(np.argmin(cost))
            if cost[b] < gain * (1 - 1e-12):
                centroids[a] = (centroids[a] * counts[a] - x[i]) / (counts[a] - 1)
                centroids[b] = (centroids[b] * counts[b] + x[i]) / (counts[b] + 1)
                counts[a] -= 1
                counts[b] += 1
                labels[i] = b
                moved = True
        if moved:
            # recompute exactly so rounding from the running updates cannot accumulate
            for c in range(k):
                centroids[c] = x[labels == c].mean(axis=0)
            history.append(_inertia(x, centroids, labels))
    return centroids, labels


def kmeans_fit(states, k: int, iters: int = 100, rng: np.random.Generator | None = None, n_init: int = 1,
               refine: bool = True) -> KMeansModel:
    """Lloyd's algorithm from k-means++ seeding; best of ``n_init`` restarts.

    With ``refine`` each restart finishes with Hartigan single-point
    transfers followed by Lloyd again, which keeps the result a Lloyd
    fixpoint.
    """
    x = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if k < 1:
        raise ContractViolation("k must be positive")
    if len(np.unique(x, axis=0)) < k:
        raise DegenerateInputError(f"need at least {k} distinct states")
    rng = rng if rng is not None else np.random.default_rng()
    best = None
    for _ in range(max(1, n_init)):
        c0 = _plusplus_init(x, k, rng)
        c, labels, history, it = _lloyd(x, c0, iters)
        if refine and k > 1:
            c, labels = _hartigan(x, c, labels, history)
            c, _, more, extra = _lloyd(x, c, iters)
            history.extend(more[1:])
            it += extra
        if best is None or history[-1] < best.inertia:
            best = KMeansModel(c, history[-1], history, it)
    return best


class ClusterIndex:
    """Cluster membership of every replay slot, kept current on each push."""

    def __init__(self, model: KMeansModel, buf):
        self.capacity = buf.capacity
        self.rebuild(model, buf)

    def rebuild(self, model: KMeansModel, buf):
        self.model = model
        self.label = np.full(self.capacity, -1, dtype=np.int64)
        self.where = np.zeros(self.capacity, dtype=np.int64)
        self.members = [[] for _ in range(model.k)]
        n = len(buf)
        if n:
            labels = model.assign(buf.states())
            for slot, c in enumerate(labels):
                self._add(slot, int(c))

    def _add(self, slot, c):
        self.label[slot] = c
        self.where[slot] = len(self.members[c])
        self.members[c].append(slot)

    def _remove(self, slot):
        c = self.label[slot]
        if c < 0:
            return
        lst = self.members[c]
        pos = self.where[slot]
        last = lst.pop()
        if last != slot:
            lst[pos] = last
            self.where[last] = pos
        self.label[slot] = -1

    def update(self, slot: int, state):
        self._remove(slot)
        self._add(slot, int(self.model.assign(state)[0]))

    def member_lists(self):
        return self.members


def _cyclic(states: np.ndarray) -> PairBatch:
    k = len(states)
    left = np.arange(k)
    return PairBatch(states, left, np.roll(left, -1))


def _draw_representatives(member_lists, rng):
    nonempty = [m for m in member_lists if len(m)]
    if len(nonempty) < 2:
        return None
    counts = np.array([len(m) for m in nonempty])
    picks = np.minimum((rng.random(len(nonempty)) * counts).astype(np.int64), counts - 1)
    return [m[p] for m, p in zip(nonempty, picks)]


def sample_pairs_clustered(model: KMeansModel, buf, rng: np.random.Generator, index: ClusterIndex | None = None) -> PairBatch:
    """One uniform buffer member per non-empty cluster, paired cyclically.

    Clusters without members are skipped. With fewer than two non-empty
    clusters this falls back to ``k`` uniformly sampled pairs.
    """
    if len(buf) == 0:
        raise NotReadyError("cannot sample pairs from an empty buffer")
    if index is not None:
        lists = index.member_lists()
    else:
        labels = model.assign(buf.states())
        lists = [np.flatnonzero(labels == c) for c in range(model.k)]
    slots = _draw_representatives(lists, rng)
    if slots is None:
        log.info("fewer than two populated clusters; using uniform pairs")
        return sample_pairs_uniform(buf, model.k, rng)
    return _cyclic(np.array([buf.state_at(s) for s in slots]))
