"""Noise schedules, forward corruption, the masked loss, and reverse sampling.

Index 0 of every schedule is the clean latent (``alpha_bar[0] == 1``). A
reverse step at index ``k >= 1`` maps ``z^k`` to ``z^(k-1)``. Resampled
schedules keep a ``timesteps`` array with the training-time step each index
corresponds to; the head is always queried with those training-time steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray      # (S+1,)
    timesteps: np.ndarray      # (S+1,), training-time step of each index
    max_steps: int             # training-time T_max
    variance: str = "posterior"

    def __post_init__(self) -> None:
        ab = self.alpha_bar
        if ab.ndim != 1 or len(ab) < 2 or len(ab) != len(self.timesteps):
            raise ConfigError("bad schedule arrays")
        if not np.all(np.diff(ab) < 0):
            raise ConfigError("alpha_bar must be strictly decreasing")

    @property
    def n_steps(self) -> int:
        return len(self.alpha_bar) - 1

    @property
    def alpha(self) -> np.ndarray:
        a = np.ones_like(self.alpha_bar)
        a[1:] = self.alpha_bar[1:] / self.alpha_bar[:-1]
        return a

    @property
    def beta(self) -> np.ndarray:
        return 1.0 - self.alpha

    @property
    def sigma(self) -> np.ndarray:
        beta = self.beta
        if self.variance == "beta":
            var = beta.copy()
            var[0] = 0.0
        else:
            var = np.zeros_like(beta)
            var[1:] = beta[1:] * (1.0 - self.alpha_bar[:-1]) / (1.0 - self.alpha_bar[1:])
        return np.sqrt(var)


def _cosine_alpha_bar(T: int, s: float = 0.008) -> np.ndarray:
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2
    beta = np.clip(1.0 - f[1:] / f[:-1], 0.0, 0.999)
    return np.concatenate([[1.0], np.cumprod(1.0 - beta)])


def _linear_alpha_bar(T: int) -> np.ndarray:
    beta = np.linspace(1e-4 * 1000 / T, 0.02 * 1000 / T, T).clip(max=0.999)
    return np.concatenate([[1.0], np.cumprod(1.0 - beta)])


def build_schedule(max_steps: int = 1000, kind: str = "cosine",
                   variance: str = "posterior") -> NoiseSchedule:
    if max_steps < 1:
        raise ConfigError(f"max_steps must be >= 1, got {max_steps}")
    if kind == "cosine":
        ab = _cosine_alpha_bar(max_steps)
    elif kind == "linear":
        ab = _linear_alpha_bar(max_steps)
    else:
        raise ConfigError(f"unknown schedule {kind!r}")
    return NoiseSchedule(ab, np.arange(max_steps + 1), max_steps, variance)


def resample_schedule(sched: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Keep ``steps`` evenly spaced indices (always including the last)."""
    if not 1 <= steps <= sched.n_steps:
        raise ConfigError(f"steps must be in [1, {sched.n_steps}], got {steps}")
    keep = np.round(np.linspace(0, sched.n_steps, steps + 1)).astype(np.int64)
    return NoiseSchedule(sched.alpha_bar[keep], sched.timesteps[keep], sched.max_steps,
                         sched.variance)


def _coef(values: np.ndarray, idx: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = torch.as_tensor(values, dtype=like.dtype)[idx]
    return out.reshape(*out.shape, *([1] * (like.dim() - out.dim())))


def _check_index(t: torch.Tensor, sched: NoiseSchedule, low: int = 0) -> None:
    if t.numel() and (int(t.min()) < low or int(t.max()) > sched.n_steps):
        raise ConfigError(f"diffusion step outside [{low}, {sched.n_steps}]")


def forward_corrupt(z: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(ab_t) z + sqrt(1 - ab_t) eps``; ``t`` broadcasts over leading dims."""
    t = torch.as_tensor(t, dtype=torch.long)
    _check_index(t, sched)
    ab = _coef(sched.alpha_bar, t, z)
    return ab.sqrt() * z + (1.0 - ab).sqrt() * eps


HeadFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def masked_diffusion_loss(head: HeadFn, z: torch.Tensor, mask: torch.Tensor,
                          h: torch.Tensor, sched: NoiseSchedule,
                          generator: torch.Generator | None = None,
                          t: torch.Tensor | None = None,
                          eps: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over masked positions of ``|eps - head(z_t, t, h)|^2``.

    ``z``: (B, N, d) clean tokens, ``mask``: (B, N) bool, ``h``: (B, N, D)
    hidden rows aligned with ``z``. ``t``/``eps`` default to fresh draws for
    every position (only masked ones contribute).
    """
    if not bool(mask.any()):
        raise ConfigError("masked_diffusion_loss needs at least one masked position")
    if t is None:
        t = torch.randint(0, sched.n_steps + 1, mask.shape, generator=generator)
    if eps is None:
        eps = torch.randn(z.shape, generator=generator, dtype=z.dtype)
    z_m, h_m, t_m, eps_m = z[mask], h[mask], t[mask], eps[mask]
    z_t = forward_corrupt(z_m, t_m, eps_m, sched)
    pred = head(z_t, torch.as_tensor(sched.timesteps)[t_m], h_m)
    return ((eps_m - pred) ** 2).sum(-1).mean()


def reverse_step(z_t: torch.Tensor, k: int, eps_pred: torch.Tensor, delta: torch.Tensor | None,
                 sched: NoiseSchedule) -> torch.Tensor:
    """One ancestral step from index ``k`` to ``k - 1`` given the noise prediction."""
    if not 1 <= k <= sched.n_steps:
        raise ConfigError(f"reverse step index must be in [1, {sched.n_steps}], got {k}")
    alpha = float(sched.alpha[k])
    ab = float(sched.alpha_bar[k])
    mean = (z_t - (1.0 - alpha) / math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(alpha)
    if delta is None or k == 1:
        return mean
    return mean + float(sched.sigma[k]) * delta


def cfg_combine(eps_cond, eps_uncond, beta: float):
    return eps_uncond + beta * (eps_cond - eps_uncond)


def cfg_scale(t: int, T: int, beta_max: float) -> float:
    """Guidance scale at decoding iteration index ``t``: ``beta_max`` at 0, 1 at ``T``."""
    if T < 1 or not 0 <= t <= T:
        raise ConfigError(f"iteration {t} outside [0, {T}]")
    if t == T:
        return 1.0
    return 1.0 + math.cos(math.pi / 2 * t / T) * (beta_max - 1.0)


def chain_noise(rng: np.random.Generator, steps: int, dim: int) -> np.ndarray:
    """Row 0 seeds ``z^steps``; row ``j >= 1`` is the ``delta`` of the ``j``-th reverse step."""
    return rng.standard_normal((steps + 1, dim))


@dataclass
class WorkCounter:
    head_evals: int = 0       # (position, diffusion step, guidance branch) triples
    encoder_evals: int = 0    # (sample, decoding iteration, guidance branch) triples


@torch.no_grad()
def sample_latent(head: HeadFn, h: torch.Tensor, sched: NoiseSchedule, noise: torch.Tensor,
                  beta: float = 1.0, h_uncond: torch.Tensor | None = None,
                  counter: WorkCounter | None = None) -> torch.Tensor:
    """Run the reverse chain for ``R`` positions in parallel.

    ``h``: (R, D) conditioning rows; ``noise``: (R, S+1, d) from
    :func:`chain_noise`. With ``h_uncond`` the head is evaluated twice per
    step and the predictions are combined with scale ``beta``.
    """
    S = sched.n_steps
    noise = torch.as_tensor(noise, dtype=h.dtype)
    if noise.shape[1] != S + 1:
        raise ConfigError(f"noise has {noise.shape[1]} rows, schedule needs {S + 1}")
    R = h.shape[0]
    z = noise[:, 0]
    for j, k in enumerate(range(S, 0, -1), start=1):
        t_model = torch.full((R,), int(sched.timesteps[k]), dtype=torch.long)
        eps = head(z, t_model, h)
        if h_uncond is not None:
            eps = cfg_combine(eps, head(z, t_model, h_uncond), beta)
        if counter is not None:
            counter.head_evals += R * (1 if h_uncond is None else 2)
        z = reverse_step(z, k, eps, noise[:, j], sched)
    return z
