"""Patching between latent grids and token sequences, plus learned projections.

Row ``i`` of a patched sequence is patch ``(i // (W/p), i % (W/p))``, flattened
in (row, col, channel) order with channel fastest. Works on numpy arrays and
torch tensors, with any number of leading batch dimensions.
"""
from __future__ import annotations

import torch
from einops import rearrange
from torch import nn

from .errors import ConfigError


def patch(grid, p: int):
    """``(..., H, W, ch)`` -> ``(..., (H/p)(W/p), p*p*ch)``."""
    if p < 1:
        raise ConfigError(f"patch factor must be >= 1, got {p}")
    H, W = grid.shape[-3], grid.shape[-2]
    if H % p or W % p:
        raise ConfigError(f"patch factor {p} does not divide grid {H}x{W}")
    return rearrange(grid, "... (h p1) (w p2) c -> ... (h w) (p1 p2 c)", p1=p, p2=p)


def unpatch(seq, p: int, height: int, width: int):
    """Inverse of :func:`patch` for a grid of ``height x width``."""
    if p < 1 or height % p or width % p:
        raise ConfigError(f"patch factor {p} incompatible with grid {height}x{width}")
    n, d = seq.shape[-2], seq.shape[-1]
    if n != (height // p) * (width // p) or d % (p * p):
        raise ConfigError(f"sequence {n}x{d} inconsistent with grid {height}x{width}, p={p}")
    return rearrange(seq, "... (h w) (p1 p2 c) -> ... (h p1) (w p2) c",
                     h=height // p, w=width // p, p1=p, p2=p)


class LatentProjection(nn.Module):
    """Token <-> model-dimension affine maps.

    ``inp`` feeds the encoder. ``out`` is an independent map used only for
    reconstruction diagnostics; generation happens in token space.
    """

    def __init__(self, token_dim: int, dim: int):
        super().__init__()
        self.token_dim, self.dim = token_dim, dim
        self.inp = nn.Linear(token_dim, dim)
        self.out = nn.Linear(dim, token_dim)

    def project_in(self, seq: torch.Tensor) -> torch.Tensor:
        if seq.shape[-1] != self.token_dim:
            raise ConfigError(f"expected token width {self.token_dim}, got {seq.shape[-1]}")
        return self.inp(seq)

    def project_out(self, seq: torch.Tensor) -> torch.Tensor:
        if seq.shape[-1] != self.dim:
            raise ConfigError(f"expected model width {self.dim}, got {seq.shape[-1]}")
        return self.out(seq)


def project_in(seq: torch.Tensor, proj: LatentProjection) -> torch.Tensor:
    return proj.project_in(seq)


def project_out(seq: torch.Tensor, proj: LatentProjection) -> torch.Tensor:
    return proj.project_out(seq)
