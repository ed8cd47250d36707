"""Iterative mask-based parallel decoding and the single-pass baseline.

Each decode owns its seed. Position selection at iteration ``t`` draws from
``rng(seed, 0, t)``; the reverse chain of position ``i`` generated at
iteration ``t`` draws from ``rng(seed, 1, t, i)``. A batched decode is
therefore the same computation as the per-item decodes, row for row.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .diffusion import WorkCounter, cfg_scale, chain_noise, resample_schedule, sample_latent
from .errors import CheckpointError, ConfigError, InvariantError
from .latent_ops import unpatch
from .masking import DecodeState, advance, select_positions
from .network import MaskedDiffusionModel
from .trainer import Checkpoint

__all__ = ["DecodeState", "Sampler", "DecodeTrace", "decode", "decode_single_pass",
           "batch_decode", "item_seeds"]


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def item_seeds(seed: int, n: int) -> list[int]:
    """Independent per-item decode seeds derived from one run seed."""
    states = np.random.SeedSequence(seed).generate_state(n, np.uint32)
    return [int(s) for s in states]


@dataclass
class DecodeTrace:
    """Per-iteration record of one batched decode (masks and chosen positions)."""

    masks: list[np.ndarray] = field(default_factory=list)    # (B, N) before each iteration
    chosen: list[np.ndarray] = field(default_factory=list)   # (B, k_t)
    tokens: list[torch.Tensor] = field(default_factory=list) # (B, N, d) after each iteration
    final_mask: np.ndarray | None = None


class Sampler:
    """A frozen model prepared for inference in a fixed dtype."""

    def __init__(self, model: MaskedDiffusionModel, dtype: torch.dtype = torch.float64):
        self.model = model.to(dtype).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.dtype = dtype
        self.cfg = model.cfg

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | None, dtype: torch.dtype = torch.float64,
                        require_trained: bool = True) -> "Sampler":
        if ckpt is None:
            raise CheckpointError("no checkpoint loaded")
        if require_trained and ckpt.phase == "init":
            raise CheckpointError("checkpoint is untrained (phase=init)")
        return cls(ckpt.build(), dtype)

    @torch.no_grad()
    def decode_tokens(self, conditions: Sequence[int | None], T: int = 64, steps: int = 100,
                      beta_max: float = 5.0, seeds: Sequence[int] | None = None,
                      counter: WorkCounter | None = None, force_cfg: bool = False,
                      trace: DecodeTrace | None = None) -> torch.Tensor:
        """Return generated token sequences ``(B, N, token_dim)``."""
        cfg = self.cfg
        B = len(conditions)
        if B == 0:
            raise ConfigError("empty batch")
        if T < 1:
            raise ConfigError(f"T must be >= 1, got {T}")
        if beta_max < 1.0:
            raise ConfigError("beta_max must be >= 1")
        sched = resample_schedule(self.model.schedule, steps)
        seeds = list(seeds) if seeds is not None else item_seeds(0, B)
        if len(seeds) != B:
            raise ConfigError(f"{len(seeds)} seeds for {B} conditions")
        nulls = [c is None or c < 0 for c in conditions]
        if any(nulls) and not all(nulls):
            raise ConfigError("a batch must be all-conditional or all-unconditional")
        classes = None if all(nulls) else torch.tensor([int(c) for c in conditions])
        guided = classes is not None and (beta_max != 1.0 or force_cfg)

        N, d = cfg.n_tokens, cfg.token_dim
        z = torch.zeros(B, N, d, dtype=self.dtype)
        states = [DecodeState.start(N, T) for _ in range(B)]
        for t in range(1, T + 1):
            chosen = np.stack([select_positions(s, _rng(seed, 0, t)) for s, seed in zip(states, seeds)])
            mask = torch.from_numpy(np.stack([s.mask for s in states]))
            if trace is not None:
                trace.masks.append(mask.numpy().copy())
                trace.chosen.append(chosen.copy())
            h = self.model.latent_hidden(self.model.encode(classes, z, mask))
            h_u = self.model.latent_hidden(self.model.encode(None, z, mask)) if guided else None
            if counter is not None:
                counter.encoder_evals += B * (2 if guided else 1)
            k = chosen.shape[1]
            if k:
                rows = torch.arange(B)[:, None].expand(B, k)
                cols = torch.from_numpy(chosen)
                noise = np.stack([chain_noise(_rng(seed, 1, t, i), sched.n_steps, d)
                                  for seed, idx in zip(seeds, chosen) for i in idx])
                out = sample_latent(self.model.head, h[rows, cols].reshape(B * k, -1), sched,
                                    torch.from_numpy(noise),
                                    beta=cfg_scale(t - 1, T, beta_max),
                                    h_uncond=h_u[rows, cols].reshape(B * k, -1) if guided else None,
                                    counter=counter)
                z[rows, cols] = out.reshape(B, k, d)
            if trace is not None:
                trace.tokens.append(z.clone())
            states = [advance(s, c) for s, c in zip(states, chosen)]
        final = np.stack([s.mask for s in states])
        if final.any():
            raise InvariantError("positions left undecoded after the last iteration")
        if trace is not None:
            trace.final_mask = final
        return z

    def to_grids(self, tokens: torch.Tensor) -> np.ndarray:
        cfg = self.cfg
        return unpatch(tokens, cfg.patch, cfg.height, cfg.width).numpy().astype(np.float64)

    def batch_decode(self, conditions: Sequence[int | None], T: int = 64, steps: int = 100,
                     beta_max: float = 5.0, seeds: Sequence[int] | None = None,
                     **kw) -> np.ndarray:
        return self.to_grids(self.decode_tokens(conditions, T, steps, beta_max, seeds, **kw))

    def decode(self, condition: int | None, T: int = 64, steps: int = 100,
               beta_max: float = 5.0, seed: int = 0, **kw) -> np.ndarray:
        return self.batch_decode([condition], T, steps, beta_max, [seed], **kw)[0]

    def decode_single_pass(self, condition: int | None, steps: int = 100,
                           beta_max: float = 5.0, seed: int = 0, **kw) -> np.ndarray:
        return self.decode(condition, 1, steps, beta_max, seed, **kw)

    def generate(self, conditions: Sequence[int | None], T: int, steps: int, beta_max: float,
                 seed: int, batch_size: int = 256) -> np.ndarray:
        """Decode many samples in chunks; item ``j`` always uses ``item_seeds(seed, n)[j]``."""
        seeds = item_seeds(seed, len(conditions))
        out = []
        for start in range(0, len(conditions), batch_size):
            sl = slice(start, start + batch_size)
            out.append(self.batch_decode(conditions[sl], T, steps, beta_max, seeds[sl]))
        return np.concatenate(out)


def decode(sampler: Sampler, condition, T=64, steps=100, beta_max=5.0, seed=0, **kw):
    return sampler.decode(condition, T, steps, beta_max, seed, **kw)


def decode_single_pass(sampler: Sampler, condition, steps=100, beta_max=5.0, seed=0, **kw):
    return sampler.decode_single_pass(condition, steps, beta_max, seed, **kw)


def batch_decode(sampler: Sampler, conditions, T=64, steps=100, beta_max=5.0, seeds=None, **kw):
    return sampler.batch_decode(conditions, T, steps, beta_max, seeds, **kw)
