import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from dslab.errors import ContractViolation, NotReadyError
from dslab.replay import Batch, ReplayBuffer, Transition


def tr(i, d=2):
    return Transition(np.full(d, float(i)), i % 3, float(i), np.full(d, i + 0.5), i % 2 == 0)


def filled(n, capacity=None):
    buf = ReplayBuffer(capacity or n, 2, 3)
    for i in range(n):
        buf.push_transition(tr(i))
    return buf


def test_ring_eviction_keeps_latest():
    buf = filled(3, capacity=2)
    assert len(buf) == 2
    assert [t.r for t in buf.contents()] == [1.0, 2.0]


def test_push_into_empty():
    buf = ReplayBuffer(5, 2, 3)
    buf.push_transition(tr(0))
    assert len(buf) == 1


def test_identical_transitions_sample_identically():
    buf = ReplayBuffer(4, 2, 3)
    for _ in range(4):
        buf.push_transition(tr(7))
    batch = buf.sample_batch(6, np.random.default_rng(0), require_full=False)
    for t in batch:
        assert t.r == 7.0 and t.a == 1 and t.s.tolist() == [7.0, 7.0]


def test_singleton_with_replacement():
    buf = filled(1)
    batch = buf.sample_batch(3, np.random.default_rng(1), require_full=False)
    assert len(batch) == 3 and all(t.r == 0.0 for t in batch)


def test_sampling_is_reproducible_under_seed():
    buf = filled(20)
    a = buf.sample_batch(8, np.random.default_rng(42))
    b = buf.sample_batch(8, np.random.default_rng(42))
    assert a.r.tolist() == b.r.tolist() and a.s.tobytes() == b.s.tobytes()


def test_sampling_is_uniform_chi_square():
    buf = filled(10)
    rewards = buf.sample_batch(100_000, np.random.default_rng(2024), require_full=False).r.astype(int)
    counts = np.bincount(rewards, minlength=10)
    assert stats.chisquare(counts).pvalue > 0.001


def test_not_ready_when_too_small():
    with pytest.raises(NotReadyError):
        filled(2).sample_batch(3, np.random.default_rng(0))
    with pytest.raises(NotReadyError):
        ReplayBuffer(3, 2, 3).sample_batch(1, np.random.default_rng(0), require_full=False)


def test_sample_states():
    buf = filled(1)
    states = buf.sample_states(4, np.random.default_rng(0))
    assert states.shape == (4, 2) and (states == 0.0).all()
    assert len(buf.sample_states(0, np.random.default_rng(0))) == 0
    big = filled(30)
    a = big.sample_states(5, np.random.default_rng(9))
    b = big.sample_states(5, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(NotReadyError):
        ReplayBuffer(3, 2, 3).sample_states(1, np.random.default_rng(0))


def test_rejects_invalid_transitions():
    buf = ReplayBuffer(3, 2, 3)
    with pytest.raises(ContractViolation):
        buf.push([np.nan, 0.0], 0, 0.0, [0.0, 0.0], False)
    with pytest.raises(ContractViolation):
        buf.push([0.0, 0.0], 3, 0.0, [0.0, 0.0], False)
    with pytest.raises(ContractViolation):
        buf.push([0.0], 0, 0.0, [0.0, 0.0], False)


def test_batch_round_trip():
    ts = [tr(i) for i in range(4)]
    batch = Batch.from_transitions(ts)
    assert [t.r for t in batch] == [t.r for t in ts]
    assert batch[2].terminal == ts[2].terminal


@settings(max_examples=50, deadline=None)
@given(capacity=st.integers(1, 12), pushes=st.integers(0, 40), seed=st.integers(0, 1000))
def test_buffer_holds_most_recent_in_order_and_sampling_is_pure(capacity, pushes, seed):
    buf = filled(pushes, capacity) if pushes else ReplayBuffer(capacity, 2, 3)
    assert len(buf) == min(pushes, capacity)
    expected = list(range(max(0, pushes - capacity), pushes))
    assert [int(t.r) for t in buf.contents()] == expected
    if len(buf):
        snapshot = [t.s.tobytes() for t in buf.contents()]
        buf.sample_batch(len(buf), np.random.default_rng(seed))
        buf.sample_states(3, np.random.default_rng(seed))
        assert [t.s.tobytes() for t in buf.contents()] == snapshot
