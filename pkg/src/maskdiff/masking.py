"""Training masks, the cosine mask schedule, and random position selection.

Decoding iterations run ``t = 1..T``. Iteration ``t`` unmasks
``mu(t-1) - mu(t)`` positions chosen uniformly from those still masked, so
masks only shrink and the per-iteration sets partition ``{0..N-1}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, InvariantError


def _check_t(t: int, T: int) -> None:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 <= t <= T:
        raise ConfigError(f"iteration {t} outside [0, {T}]")


def gamma(t: int, T: int) -> float:
    """Fraction of positions still masked after iteration ``t``."""
    _check_t(t, T)
    if t == 0:
        return 1.0
    if t == T:
        return 0.0
    return math.cos(math.pi / 2 * t / T)


def masked_count(t: int, T: int, N: int) -> int:
    return int(math.floor(gamma(t, T) * N))


def pred_count(t: int, T: int, N: int) -> int:
    """Positions generated at iteration ``t`` (1-based)."""
    if t < 1:
        raise ConfigError("pred_count is defined for t >= 1")
    return masked_count(t - 1, T, N) - masked_count(t, T, N)


def sample_training_mask(N: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask with exactly ``floor(q * N)`` masked positions."""
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"q must be in (0, 1], got {q}")
    mask = np.zeros(N, dtype=bool)
    mask[rng.permutation(N)[: int(math.floor(q * N))]] = True
    return mask


MASK_MODES = ("fixed", "range")


def sample_training_masks(batch: int, N: int, q: float, generator: torch.Generator,
                          mode: str = "fixed") -> torch.Tensor:
    """Batched torch variant: ``(batch, N)`` bool with the same masked count in every row.

    ``fixed`` masks exactly ``floor(q * N)`` positions. ``range`` draws one count per
    batch uniformly from ``floor(q * N) .. N``, so training also covers the nearly
    empty and nearly full contexts met during iterative decoding.
    """
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"q must be in (0, 1], got {q}")
    if mode not in MASK_MODES:
        raise ConfigError(f"unknown mask mode {mode!r}")
    k = int(math.floor(q * N))
    if mode == "range":
        k = int(torch.randint(k, N + 1, (1,), generator=generator))
    order = torch.rand(batch, N, generator=generator).argsort(dim=1)
    mask = torch.zeros(batch, N, dtype=torch.bool)
    mask.scatter_(1, order[:, :k], True)
    return mask


@dataclass
class DecodeState:
    """Mask and progress of one decode: ``t`` iterations done out of ``T``."""

    mask: np.ndarray
    t: int
    T: int

    @classmethod
    def start(cls, N: int, T: int) -> "DecodeState":
        return cls(np.ones(N, dtype=bool), 0, T)

    @property
    def N(self) -> int:
        return len(self.mask)


def select_positions(state: DecodeState, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices to generate at iteration ``state.t + 1``."""
    if state.t >= state.T:
        raise InvariantError(f"decode already finished (t={state.t}, T={state.T})")
    N = state.N
    masked = np.flatnonzero(state.mask)
    expected = masked_count(state.t, state.T, N)
    if len(masked) != expected:
        raise InvariantError(f"{len(masked)} masked positions at t={state.t}, expected {expected}")
    k = expected - masked_count(state.t + 1, state.T, N)
    return np.sort(rng.choice(masked, size=k, replace=False))


def advance(state: DecodeState, chosen: np.ndarray) -> DecodeState:
    mask = state.mask.copy()
    if not mask[chosen].all():
        raise InvariantError("selected an already generated position")
    mask[chosen] = False
    return DecodeState(mask, state.t + 1, state.T)
