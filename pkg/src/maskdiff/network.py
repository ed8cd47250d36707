"""Two-stage latent encoder and the MLP diffusion head.

The encoder follows the MAE layout: stage 1 sees the condition slots plus the
unmasked latents only; a shared mask embedding is reinserted at masked slots
before stage 2 runs over the full ``L + N`` sequence. The head is a per-row
MLP with adaptive layer norm and no cross-position interaction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .diffusion import NoiseSchedule, build_schedule
from .errors import ConfigError
from .latent_ops import LatentProjection


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, S, D = x.shape
        qkv = self.qkv(x).reshape(B, S, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // self.heads)
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, S, D))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def block_flops(seq: int, dim: int, mlp_ratio: float) -> int:
    """Multiply-add FLOPs (x2) of the matmuls in one block at sequence length ``seq``."""
    hidden = int(dim * mlp_ratio)
    proj = 2 * seq * dim * (3 * dim + dim + 2 * hidden)
    attn = 2 * 2 * seq * seq * dim
    return proj + attn


@dataclass
class EncodeOutput:
    h: torch.Tensor              # (B, L+N, D)
    g: torch.Tensor              # stage-1 output, (B, L+n_keep, D)
    g_prime: torch.Tensor        # stage-2 input, (B, L+N, D)
    keep_idx: torch.Tensor       # (B, n_keep) latent positions seen by stage 1


class LatentEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D, L, N = cfg.dim, cfg.cond_len, cfg.n_tokens
        self.cfg = cfg
        self.proj = LatentProjection(cfg.token_dim, D)
        self.class_embed = nn.Parameter(torch.zeros(cfg.num_classes, D))
        self.slot_offset = nn.Parameter(torch.zeros(L, D))
        self.null_embed = nn.Parameter(torch.zeros(D))
        self.mask_embed = nn.Parameter(torch.zeros(D))
        self.pos_embed = nn.Parameter(torch.zeros(L + N, D))
        self.stage1 = nn.ModuleList(Block(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth_stage1))
        self.norm1 = nn.LayerNorm(D)
        self.stage2 = nn.ModuleList(Block(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth_stage2))
        self.norm2 = nn.LayerNorm(D)
        self.flops = 0

    def condition_tokens(self, classes: torch.Tensor | None, batch: int) -> torch.Tensor:
        """(B, L, D) condition slots; ``None`` or ``-1`` entries use the null embedding."""
        L, D = self.cfg.cond_len, self.cfg.dim
        null = self.null_embed.expand(batch, L, D)
        if classes is None:
            return null
        classes = torch.as_tensor(classes, dtype=torch.long)
        if classes.shape != (batch,):
            raise ConfigError(f"expected {batch} class ids, got shape {tuple(classes.shape)}")
        if int(classes.max()) >= self.cfg.num_classes or int(classes.min()) < -1:
            raise ConfigError("class id out of range")
        cond = self.class_embed[classes.clamp(min=0)][:, None, :] + self.slot_offset
        is_null = (classes < 0)[:, None, None]
        return torch.where(is_null, null, cond)

    def _run(self, blocks: nn.ModuleList, x: torch.Tensor) -> torch.Tensor:
        for blk in blocks:
            self.flops += x.shape[0] * block_flops(x.shape[1], self.cfg.dim, self.cfg.mlp_ratio)
            x = blk(x)
        return x

    def forward(self, cond: torch.Tensor, z: torch.Tensor, mask: torch.Tensor) -> EncodeOutput:
        """``cond``: (B, L, D); ``z``: (B, N, token_dim); ``mask``: (B, N) bool, True = masked.

        Every row must mask the same number of positions.
        """
        cfg = self.cfg
        L, N, D = cfg.cond_len, cfg.n_tokens, cfg.dim
        B = z.shape[0]
        if cond.shape != (B, L, D) or z.shape != (B, N, cfg.token_dim) or mask.shape != (B, N):
            raise ConfigError(
                f"encode shapes cond={tuple(cond.shape)} z={tuple(z.shape)} mask={tuple(mask.shape)}"
                f" do not match L={L}, N={N}, D={D}, token_dim={cfg.token_dim}")
        counts = (~mask).sum(dim=1)
        n_keep = int(counts[0]) if B else 0
        if bool((counts != n_keep).any()):
            raise ConfigError("all rows in a batch must keep the same number of positions")

        pos_c, pos_z = self.pos_embed[:L], self.pos_embed[L:]
        x = self.proj.project_in(z) + pos_z
        # stable sort puts kept positions first, in increasing index order
        keep_idx = torch.argsort(mask.to(torch.int8), dim=1, stable=True)[:, :n_keep]
        x_keep = torch.gather(x, 1, keep_idx[..., None].expand(B, n_keep, D))
        g = self.norm1(self._run(self.stage1, torch.cat([cond + pos_c, x_keep], dim=1)))

        lat = (self.mask_embed + pos_z).expand(B, N, D)
        lat = lat.scatter(1, keep_idx[..., None].expand(B, n_keep, D), g[:, L:])
        g_prime = torch.cat([g[:, :L], lat], dim=1)
        h = self.norm2(self._run(self.stage2, g_prime))
        return EncodeOutput(h, g, g_prime, keep_idx)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, ``(R,) -> (R, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int, freq_dim: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.freq_dim).to(self.mlp[0].weight.dtype)
        return self.mlp(emb)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 3 * width))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale, gate = self.ada(c).chunk(3, dim=-1)
        return x + gate * self.mlp(modulate(self.norm(x), shift, scale))


class FinalLayer(nn.Module):
    def __init__(self, width: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))
        self.linear = nn.Linear(width, out_dim)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.ada(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class DiffusionHead(nn.Module):
    """Noise predictor ``eps(z_t | t, h)`` applied independently to each row.

    With ``alpha_bar`` given, the MLP output ``v`` is mapped to
    ``eps = sqrt(abar_t) v + sqrt(1 - abar_t) z_t``. This is still a noise
    prediction (the optimum is the true conditional ``E[eps | z_t]``) but an
    output error no longer gets amplified by ``1/sqrt(abar_t)`` in the reverse
    step when ``abar_t`` is close to 0. Without it the MLP predicts ``eps`` directly.
    """

    def __init__(self, target_dim: int, cond_dim: int, width: int = 256, depth: int = 3,
                 freq_dim: int = 256, max_steps: int = 1000, alpha_bar=None):
        super().__init__()
        self.target_dim, self.cond_dim, self.max_steps = target_dim, cond_dim, max_steps
        if alpha_bar is not None:
            alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
            if alpha_bar.shape != (max_steps + 1,):
                raise ConfigError(f"alpha_bar needs {max_steps + 1} entries")
            self._skip = (np.sqrt(alpha_bar), np.sqrt(1.0 - alpha_bar))
        else:
            self._skip = None
        self.input_proj = nn.Linear(target_dim, width)
        self.time_embed = TimestepEmbedder(width, freq_dim)
        self.cond_embed = nn.Linear(cond_dim, width)
        self.blocks = nn.ModuleList(ResBlock(width) for _ in range(depth))
        self.final = FinalLayer(width, target_dim)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() and (int(t.min()) < 0 or int(t.max()) > self.max_steps):
            raise ConfigError(f"timestep outside [0, {self.max_steps}]")
        x = self.input_proj(z_t)
        c = self.time_embed(t) + self.cond_embed(h)
        for blk in self.blocks:
            x = blk(x, c)
        out = self.final(x, c)
        if self._skip is None:
            return out
        idx = t.reshape(-1).numpy()
        a = torch.from_numpy(self._skip[0][idx]).to(out.dtype).reshape(*t.shape, 1)
        b = torch.from_numpy(self._skip[1][idx]).to(out.dtype).reshape(*t.shape, 1)
        return a * out + b * z_t


class MaskedDiffusionModel(nn.Module):
    """Encoder (phi) + diffusion head (theta) + the training noise schedule."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = LatentEncoder(cfg)
        self.schedule: NoiseSchedule = build_schedule(
            cfg.max_diffusion_steps, cfg.noise_schedule, cfg.sampler_variance)
        self.head = DiffusionHead(cfg.token_dim, cfg.dim, cfg.head_width, cfg.head_depth,
                                  cfg.time_freq_dim, cfg.max_diffusion_steps,
                                  self.schedule.alpha_bar if cfg.head_param == "v" else None)

    def encode(self, classes, z: torch.Tensor, mask: torch.Tensor) -> EncodeOutput:
        cond = self.encoder.condition_tokens(classes, z.shape[0])
        return self.encoder(cond, z, mask)

    def latent_hidden(self, out: EncodeOutput) -> torch.Tensor:
        return out.h[:, self.cfg.cond_len:]


def init_params(model: nn.Module, seed: int) -> nn.Module:
    """Deterministic init: fan-in scaled Gaussian linears, zero biases, unit norm gains,
    small Gaussian embeddings, and a zero output layer in every diffusion head."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                w = module.weight
                w.copy_(torch.randn(w.shape, generator=gen, dtype=w.dtype) / math.sqrt(w.shape[1]))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.LayerNorm) and module.elementwise_affine:
                module.weight.fill_(1.0)
                module.bias.zero_()
            for p in module.parameters(recurse=False):
                if not isinstance(module, (nn.Linear, nn.LayerNorm)):
                    p.copy_(0.02 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
        for head in [m for m in model.modules() if isinstance(m, DiffusionHead)]:
            head.final.linear.weight.zero_()
            head.final.linear.bias.zero_()
    return model


def build_model(cfg: ModelConfig, seed: int = 0) -> MaskedDiffusionModel:
    return init_params(MaskedDiffusionModel(cfg), seed)
