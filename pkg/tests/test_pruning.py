import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fieldattn import PruneConfig, PruneState, finalize, prune_step, sparsity_at
from fieldattn.pruning import pruned_count


def _state(shape=(2, 15)):
    return PruneState(mask=np.ones(shape))


def test_schedule_examples():
    cfg = PruneConfig(0.6, 0.8, 100)
    assert sparsity_at(100, cfg) == pytest.approx(0.12, abs=1e-15)
    assert sparsity_at(2000, cfg) == pytest.approx(0.6 * (1 - 0.8**20), abs=1e-15)
    assert round(sparsity_at(2000, cfg), 4) == 0.5931
    assert sparsity_at(2000, cfg) < 0.6
    assert all(sparsity_at(j, PruneConfig(0.0)) == 0 for j in (1, 10, 10_000))


def test_schedule_rejects_step_zero():
    with pytest.raises(ValueError):
        sparsity_at(0, PruneConfig())


@pytest.mark.parametrize("bad", [dict(target_sparsity=1.0), dict(damping_d=1.0), dict(damping_u=0), dict(prune_interval=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        PruneConfig(**bad)


@settings(max_examples=100, deadline=None)
@given(S=st.floats(0, 0.99), D=st.floats(0.01, 0.99), U=st.floats(1, 1000), j=st.integers(1, 100_000))
def test_schedule_monotone_and_bounded(S, D, U, j):
    cfg = PruneConfig(S, D, U)
    a, b = sparsity_at(j, cfg), sparsity_at(j + 1, cfg)
    assert a <= b <= S


def test_prune_step_counts_and_zeroes():
    rng = np.random.default_rng(0)
    R = rng.normal(size=(2, 15))
    st_ = _state()
    prune_step(R, st_, 0.12)
    assert st_.n_pruned == 3
    assert np.all(R[st_.mask == 0] == 0)


def test_smaller_target_changes_nothing():
    R = np.random.default_rng(1).normal(size=(2, 15))
    st_ = _state()
    prune_step(R, st_, 0.4)
    before = st_.mask.copy()
    prune_step(R, st_, 0.1)
    assert np.array_equal(before, st_.mask)


def test_zero_entry_goes_first():
    R = np.arange(1.0, 31.0).reshape(2, 15)
    R[1, 7] = 0.0
    st_ = _state()
    prune_step(R, st_, 1 / 30 + 1e-6)
    assert st_.n_pruned == 1 and st_.mask[1, 7] == 0


def test_ties_prune_later_row_major_positions_first():
    R = np.ones((1, 4))
    st_ = PruneState(mask=np.ones((1, 4)))
    prune_step(R, st_, 0.5)
    assert np.array_equal(st_.mask, [[1, 1, 0, 0]])


@pytest.mark.parametrize("S, survivors", [(0.6, 12), (0.8, 6), (0.0, 30)])
def test_finalize_survivor_counts(S, survivors):
    R = np.random.default_rng(2).normal(size=(2, 15))
    st_ = _state()
    finalize(R, st_, PruneConfig(S))
    assert int(st_.mask.sum()) == survivors


def test_floor_slack_guards_rounding():
    # 0.58 * 50 evaluates to 28.999999999999996 in binary floating point
    assert 0.58 * 50 < 29
    assert pruned_count(0.58, 50) == 29
    assert pruned_count(0.12, 30) == 3


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), S=st.sampled_from([0.2, 0.5, 0.6, 0.8]), shape=st.sampled_from([(2, 15), (3, 4), (1, 7)]))
def test_finalize_keeps_largest_magnitudes(seed, S, shape):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=shape)
    R0 = R.copy()
    st_ = PruneState(mask=np.ones(shape))
    finalize(R, st_, PruneConfig(S))
    keep = R0.size - math.floor(S * R0.size + 1e-9)
    # brute-force oracle: sort all entries by |R| descending
    oracle = sorted(range(R0.size), key=lambda i: -abs(R0.flat[i]))[:keep]
    assert set(np.flatnonzero(st_.mask)) == set(oracle)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.lists(st.floats(0, 0.95), min_size=1, max_size=12))
def test_mask_monotone_and_conserved(seed, steps):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(2, 15))
    st_ = _state()
    pruned = set()
    for s in steps:
        R += rng.normal(scale=0.1, size=R.shape) * st_.mask  # training moves only live weights
        prune_step(R, st_, s)
        now = set(np.flatnonzero(st_.mask == 0))
        assert pruned <= now
        assert int(st_.mask.sum()) + st_.n_pruned == 30
        pruned = now
