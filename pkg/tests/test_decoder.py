import numpy as np
import pytest
import torch

from maskdiff.decoder import (DecodeTrace, Sampler, batch_decode, decode, decode_single_pass,
                              item_seeds)
from maskdiff.diffusion import WorkCounter
from maskdiff.errors import CheckpointError, ConfigError
from maskdiff.masking import masked_count
from maskdiff.synthdata import SynthSpec, gen_dataset
from maskdiff.trainer import Trainer, fresh_checkpoint
from maskdiff.config import TrainConfig

from conftest import tiny_config


@pytest.fixture(scope="module")
def trained():
    data = gen_dataset(SynthSpec(K=3, height=8, width=4, channels=2, seed=0), 256)
    cfg = TrainConfig(lr=3e-3, steps=150, batch_size=16, mask_mode="range")
    return Trainer(data, cfg, fresh_checkpoint(tiny_config(), 0)).run()


@pytest.fixture(scope="module")
def sampler(trained):
    return Sampler.from_checkpoint(trained)


def test_checkpoint_requirements(trained):
    with pytest.raises(CheckpointError):
        Sampler.from_checkpoint(None)
    with pytest.raises(CheckpointError):
        Sampler.from_checkpoint(fresh_checkpoint(tiny_config()))
    assert Sampler.from_checkpoint(fresh_checkpoint(tiny_config()), require_trained=False)


def test_output_shape_and_finite(sampler):
    g = sampler.decode(1, T=4, steps=10, seed=0)
    assert g.shape == (8, 4, 2) and np.isfinite(g).all()
    assert np.abs(g).max() < 10


def test_deterministic(sampler):
    a = sampler.decode(2, T=5, steps=10, seed=3)
    b = sampler.decode(2, T=5, steps=10, seed=3)
    c = sampler.decode(2, T=5, steps=10, seed=4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_single_pass_is_t1(sampler):
    a = decode_single_pass(sampler, 0, steps=10, seed=5)
    b = decode(sampler, 0, T=1, steps=10, seed=5)
    assert np.array_equal(a, b)


def test_batch_equals_sequential(sampler):
    seeds = item_seeds(11, 8)
    conds = [0, 1, 2, 0, 1, 2, 0, 1]
    batch = batch_decode(sampler, conds, T=6, steps=12, beta_max=3.0, seeds=seeds)
    for i, (c, s) in enumerate(zip(conds, seeds)):
        single = decode(sampler, c, T=6, steps=12, beta_max=3.0, seed=s)
        assert np.max(np.abs(batch[i] - single)) <= 1e-12
    assert np.array_equal(batch_decode(sampler, [1], T=6, steps=12, seeds=[7])[0],
                          decode(sampler, 1, T=6, steps=12, seed=7))


def test_generate_chunking_invariant(sampler):
    conds = [0, 1, 2, 1, 0]
    a = sampler.generate(conds, 4, 8, 2.0, seed=1, batch_size=2)
    b = sampler.generate(conds, 4, 8, 2.0, seed=1, batch_size=256)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_mask_laws_and_write_once(sampler):
    trace = DecodeTrace()
    T, N = 6, sampler.cfg.n_tokens
    sampler.decode_tokens([0, 2], T=T, steps=5, seeds=[1, 2], trace=trace)
    assert not trace.final_mask.any()
    for t, (mask, chosen) in enumerate(zip(trace.masks, trace.chosen)):
        assert (mask.sum(1) == masked_count(t, T, N)).all()
        for b in range(2):
            assert mask[b, chosen[b]].all()
    for a, b in zip(trace.masks, trace.masks[1:] + [trace.final_mask]):
        assert not (b & ~a).any()
    for b in range(2):
        allc = np.concatenate([c[b] for c in trace.chosen])
        assert sorted(allc.tolist()) == list(range(N))
    # rows written at iteration t never change afterwards
    for t, chosen in enumerate(trace.chosen):
        for b in range(2):
            rows = chosen[b]
            for later in trace.tokens[t:]:
                assert torch.equal(later[b, rows], trace.tokens[t][b, rows])


def test_work_counters(sampler):
    N = sampler.cfg.n_tokens
    for beta, factor in ((1.0, 1), (4.0, 2)):
        c = WorkCounter()
        sampler.decode_tokens([1, 2, 0], T=5, steps=7, beta_max=beta, seeds=[0, 1, 2], counter=c)
        assert c.head_evals == 3 * N * 7 * factor
        assert c.encoder_evals == 3 * 5 * factor
    c = WorkCounter()
    sampler.decode_tokens([None], T=5, steps=7, beta_max=4.0, seeds=[0], counter=c)
    assert (c.head_evals, c.encoder_evals) == (N * 7, 5)


def test_t_larger_than_n(sampler):
    g = sampler.decode(0, T=20, steps=4, seed=0)
    assert np.isfinite(g).all()


def test_guided_beta_one_equals_unguided(sampler):
    a = sampler.decode_tokens([0, 1], T=4, steps=8, beta_max=1.0, seeds=[3, 4])
    b = sampler.decode_tokens([0, 1], T=4, steps=8, beta_max=1.0, seeds=[3, 4], force_cfg=True)
    assert torch.max(torch.abs(a - b)).item() <= 1e-12


def test_unconditional_decode(sampler):
    g = sampler.decode(None, T=3, steps=5, seed=0)
    assert np.isfinite(g).all()


def test_errors(sampler):
    with pytest.raises(ConfigError):
        sampler.decode_tokens([], T=2)
    with pytest.raises(ConfigError):
        sampler.decode_tokens([0, None], T=2, steps=3)
    with pytest.raises(ConfigError):
        sampler.decode(0, T=0)
    with pytest.raises(ConfigError):
        sampler.decode(0, T=2, steps=sampler.cfg.max_diffusion_steps + 1)
    with pytest.raises(ConfigError):
        sampler.decode(0, T=2, steps=3, beta_max=0.5)
    with pytest.raises(ConfigError):
        sampler.decode_tokens([0, 1], T=2, steps=3, seeds=[1])


def test_item_seeds():
    a = item_seeds(5, 10)
    assert a == item_seeds(5, 10) and len(set(a)) == 10
    assert item_seeds(5, 4) == a[:4]
    assert a != item_seeds(6, 10)
