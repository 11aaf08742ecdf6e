"""Fixed-capacity ring buffer of transitions with uniform sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NotReadyError


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool


@dataclass
class Batch:
    """A mini-batch stored column-wise; indexing yields Transitions."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray

    def __len__(self):
        return len(self.a)

    def __getitem__(self, j) -> Transition:
        return Transition(self.s[j], int(self.a[j]), float(self.r[j]), self.s_next[j], bool(self.terminal[j]))

    def __iter__(self):
        return (self[j] for j in range(len(self)))

    @classmethod
    def from_transitions(cls, transitions) -> "Batch":
        ts = list(transitions)
        return cls(
            np.array([t.s for t in ts], dtype=np.float64),
            np.array([t.a for t in ts], dtype=np.int64),
            np.array([t.r for t in ts], dtype=np.float64),
            np.array([t.s_next for t in ts], dtype=np.float64),
            np.array([t.terminal for t in ts], dtype=bool),
        )


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, n_actions: int):
        if capacity < 1:
            raise ContractViolation("capacity must be positive")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self._s = np.zeros((capacity, obs_dim))
        self._a = np.zeros(capacity, dtype=np.int64)
        self._r = np.zeros(capacity)
        self._s2 = np.zeros((capacity, obs_dim))
        self._term = np.zeros(capacity, dtype=bool)
        self.insertions = 0

    def __len__(self):
        return min(self.insertions, self.capacity)

    def push(self, s, a, r, s_next, terminal) -> int:
        """Store one transition, overwriting the oldest when full. Returns the slot used."""
        s = np.asarray(s, dtype=np.float64)
        s_next = np.asarray(s_next, dtype=np.float64)
        if s.shape != (self.obs_dim,) or s_next.shape != (self.obs_dim,):
            raise ContractViolation(f"states must have shape ({self.obs_dim},)")
        if not (np.isfinite(s).all() and np.isfinite(s_next).all() and np.isfinite(r)):
            raise ContractViolation("transition contains non-finite values")
        if not 0 <= a < self.n_actions:
            raise ContractViolation(f"action {a} outside the action set")
        slot = self.insertions % self.capacity
        self._s[slot] = s
        self._a[slot] = a
        self._r[slot] = r
        self._s2[slot] = s_next
        self._term[slot] = terminal
        self.insertions += 1
        return slot

    def push_transition(self, t: Transition) -> int:
        return self.push(t.s, t.a, t.r, t.s_next, t.terminal)

    def _gather(self, idx) -> Batch:
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._term[idx])

    def sample_batch(self, m: int, rng: np.random.Generator, *, require_full: bool = True) -> Batch:
        """``m`` uniform draws with replacement.

        By default the buffer must already hold ``m`` transitions; pass
        ``require_full=False`` to oversample a smaller (non-empty) buffer.
        """
        if len(self) == 0 or (require_full and len(self) < m):
            raise NotReadyError(f"buffer holds {len(self)} transitions, need {m}")
        return self._gather(rng.integers(0, len(self), size=m))

    def sample_states(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if len(self) == 0:
            raise NotReadyError("buffer is empty")
        return self._s[rng.integers(0, len(self), size=count)]

    def states(self) -> np.ndarray:
        """Stored ``s`` fields indexed by slot (not insertion order)."""
        return self._s[: len(self)]

    def state_at(self, slot: int) -> np.ndarray:
        return self._s[slot]

    def contents(self) -> list[Transition]:
        """All stored transitions, oldest first."""
        n = len(self)
        start = self.insertions - n
        order = [(start + i) % self.capacity for i in range(n)]
        return list(self._gather(np.array(order, dtype=np.int64))) if n else []


def sample_batch(buf: ReplayBuffer, m: int, rng, *, require_full: bool = True) -> Batch:
    return buf.sample_batch(m, rng, require_full=require_full)


def sample_states(buf: ReplayBuffer, count: int, rng) -> np.ndarray:
    return buf.sample_states(count, rng)
