import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from maskdiff.errors import ConfigError, InvariantError
from maskdiff.masking import (DecodeState, advance, gamma, masked_count, pred_count,
                              sample_training_mask, sample_training_masks, select_positions)


def test_gamma_endpoints_and_midpoint():
    assert gamma(0, 64) == 1.0
    assert gamma(64, 64) == 0.0
    assert abs(gamma(32, 64) - 0.7071068) < 1e-6


def test_gamma_out_of_range():
    with pytest.raises(ConfigError):
        gamma(65, 64)
    with pytest.raises(ConfigError):
        gamma(-1, 64)
    with pytest.raises(ConfigError):
        gamma(0, 0)


def test_masked_count_values():
    assert masked_count(0, 64, 256) == 256
    assert masked_count(64, 64, 256) == 0
    assert masked_count(32, 64, 256) == 181


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.integers(1, 600))
def test_schedule_endpoint_law(T, N):
    assert masked_count(0, T, N) == N
    assert masked_count(T, T, N) == 0
    counts = [masked_count(t, T, N) for t in range(T + 1)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert sum(pred_count(t, T, N) for t in range(1, T + 1)) == N


def test_continuous_pred_count_strictly_increasing():
    T, N = 64, 256
    cont = [(gamma(t, T) - gamma(t + 1, T)) * N for t in range(T)]
    assert all(b > a for a, b in zip(cont, cont[1:]))
    floored = [pred_count(t, T, N) for t in range(1, T + 1)]
    assert all(b >= a - 1 for a, b in zip(floored, floored[1:]))


def test_training_mask_count():
    r = np.random.default_rng(0)
    assert sample_training_mask(256, 0.7, r).sum() == 179
    assert sample_training_mask(256, 1.0, r).all()
    with pytest.raises(ConfigError):
        sample_training_mask(8, 0.0, r)
    with pytest.raises(ConfigError):
        sample_training_mask(8, 1.5, r)


def test_training_mask_position_frequency():
    r = np.random.default_rng(1)
    N, q, n = 32, 0.7, 10000
    freq = np.mean([sample_training_mask(N, q, r) for _ in range(n)], axis=0)
    p = math.floor(q * N) / N
    bound = 3 * math.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(freq - p) <= bound + 1e-12)
    # the nominal fraction q is within the same band up to the flooring offset
    assert abs(p - q) < 1 / N


def test_batched_training_masks():
    gen = torch.Generator().manual_seed(0)
    m = sample_training_masks(16, 32, 0.7, gen)
    assert m.shape == (16, 32) and (m.sum(1) == 22).all()
    assert torch.equal(sample_training_masks(4, 32, 0.7, torch.Generator().manual_seed(5)),
                       sample_training_masks(4, 32, 0.7, torch.Generator().manual_seed(5)))


def test_range_training_masks():
    gen = torch.Generator().manual_seed(0)
    counts = set()
    for _ in range(400):
        m = sample_training_masks(4, 32, 0.7, gen, mode="range")
        c = m.sum(1)
        assert (c == c[0]).all()
        counts.add(int(c[0]))
    assert counts == set(range(22, 33))
    with pytest.raises(ConfigError):
        sample_training_masks(4, 32, 0.7, gen, mode="bogus")


def run_decode(N, T, seed):
    r = np.random.default_rng(seed)
    s = DecodeState.start(N, T)
    masks, chosen = [s.mask.copy()], []
    for _ in range(T):
        c = select_positions(s, r)
        chosen.append(c)
        s = advance(s, c)
        masks.append(s.mask.copy())
    return masks, chosen


def test_single_iteration_selects_all():
    _, chosen = run_decode(17, 1, 0)
    assert chosen[0].tolist() == list(range(17))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 80), st.integers(1, 70), st.integers(0, 10**6))
def test_partition_and_subset_laws(N, T, seed):
    masks, chosen = run_decode(N, T, seed)
    for t, (a, b) in enumerate(zip(masks, masks[1:])):
        assert not (b & ~a).any()                      # M^(t+1) <= M^(t)
        assert a.sum() == masked_count(t, T, N)
    allc = np.concatenate(chosen) if chosen else np.array([], int)
    assert len(allc) == len(set(allc.tolist())) == N
    assert not masks[-1].any()


def test_select_positions_detects_bad_state():
    s = DecodeState(np.ones(8, dtype=bool), 1, 4)       # should have fewer masked at t=1
    with pytest.raises(InvariantError):
        select_positions(s, np.random.default_rng(0))
    done = DecodeState(np.zeros(8, dtype=bool), 4, 4)
    with pytest.raises(InvariantError):
        select_positions(done, np.random.default_rng(0))


def test_advance_rejects_regeneration():
    s = DecodeState(np.array([True, False, True]), 0, 2)
    with pytest.raises(InvariantError):
        advance(s, np.array([1]))


def test_selection_uniform_over_masked():
    # first pick of a T=N decode is uniform over all N positions
    N = 8
    hits = np.zeros(N)
    for seed in range(4000):
        hits[select_positions(DecodeState.start(N, 64), np.random.default_rng(seed))] += 1
    k = pred_count(1, 64, N)
    assert k >= 0
    if k:
        expected = 4000 * k / N
        assert np.all(np.abs(hits - expected) < 5 * math.sqrt(expected))
