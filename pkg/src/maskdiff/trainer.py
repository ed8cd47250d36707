"""Unconditional pre-training and class-conditional training.

All randomness of step ``s`` comes from a generator seeded by ``(seed, phase, s)``,
so a run resumed from a checkpoint replays the uninterrupted trajectory exactly.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, TrainConfig
from .diffusion import masked_diffusion_loss
from .errors import ConfigError, TrainingDiverged
from .latent_ops import patch
from .masking import sample_training_masks
from .network import MaskedDiffusionModel, build_model
from .synthdata import FeatureOracle, GridSet

log = logging.getLogger(__name__)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, torch.Tensor]
    phase: str = "init"                   # init | unconditional | conditional
    step: int = 0
    seed: int = 0
    train_config: TrainConfig | None = None
    moments: dict[str, dict[str, torch.Tensor]] | None = None
    oracle: FeatureOracle | None = None
    oracle_K: int | None = None

    def build(self, dtype: torch.dtype = torch.float32) -> MaskedDiffusionModel:
        model = MaskedDiffusionModel(self.model_config)
        model.load_state_dict(self.params)
        return model.to(dtype)


def snapshot(model: MaskedDiffusionModel, **kw) -> Checkpoint:
    params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(model.cfg, params, **kw)


def fresh_checkpoint(cfg: ModelConfig, seed: int = 0, oracle: FeatureOracle | None = None,
                     oracle_K: int | None = None) -> Checkpoint:
    return snapshot(build_model(cfg, seed), seed=seed, oracle=oracle, oracle_K=oracle_K)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                             eps=cfg.adam_eps, weight_decay=cfg.weight_decay, foreach=False)


def optimizer_step(optimizer: torch.optim.Optimizer) -> None:
    """AdamW update after checking every gradient is finite."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise TrainingDiverged("non-finite gradient")
    optimizer.step()


def _export_moments(model, optimizer) -> dict[str, dict[str, torch.Tensor]]:
    out = {}
    for name, p in model.named_parameters():
        st = optimizer.state.get(p)
        if st:
            out[name] = {"exp_avg": st["exp_avg"].clone(), "exp_avg_sq": st["exp_avg_sq"].clone(),
                         "step": st["step"].clone()}
    return out


def _import_moments(model, optimizer, moments) -> None:
    params = dict(model.named_parameters())
    for name, st in moments.items():
        optimizer.state[params[name]] = {k: v.clone() for k, v in st.items()}


def step_generator(seed: int, phase: str, step: int) -> torch.Generator:
    phase_id = 1 if phase == "conditional" else 0
    state = np.random.SeedSequence([seed, phase_id, step]).generate_state(1, np.uint64)
    return torch.Generator().manual_seed(int(state[0] >> np.uint64(1)))


class Trainer:
    """One training phase over a fixed dataset."""

    def __init__(self, dataset: GridSet, config: TrainConfig, init: Checkpoint,
                 log_path: str | Path | None = None):
        mcfg = init.model_config
        if dataset.grids.shape[1:] != mcfg.grid_shape:
            raise ConfigError(f"dataset grids {dataset.grids.shape[1:]} do not match model "
                              f"grid {mcfg.grid_shape}")
        self.config = config
        self.init = init
        self.model = init.build()
        self.tokens = patch(torch.as_tensor(dataset.grids, dtype=torch.float32), mcfg.patch)
        self.labels = torch.as_tensor(dataset.labels, dtype=torch.long)
        self.optimizer = make_optimizer(self.model, config)
        self.step = 0
        if init.phase == config.phase and init.moments is not None:
            _import_moments(self.model, self.optimizer, init.moments)
            self.step = init.step
        self.history: list[dict] = []
        self.log_path = Path(log_path) if log_path else None

    def batch(self, gen: torch.Generator):
        cfg = self.config
        idx = torch.randint(0, len(self.tokens), (cfg.batch_size,), generator=gen)
        drop = torch.rand(cfg.batch_size, generator=gen) < cfg.cond_dropout_p
        if cfg.phase == "unconditional":
            classes = torch.full((cfg.batch_size,), -1, dtype=torch.long)
        else:
            classes = torch.where(drop, torch.full_like(idx, -1), self.labels[idx])
        mask = sample_training_masks(cfg.batch_size, self.model.cfg.n_tokens, cfg.q, gen,
                                     cfg.mask_mode)
        return self.tokens[idx], classes, mask

    def train_step(self) -> float:
        gen = step_generator(self.config.seed, self.config.phase, self.step)
        z, classes, mask = self.batch(gen)
        out = self.model.encode(classes, z, mask)
        loss = masked_diffusion_loss(self.model.head, z, mask, self.model.latent_hidden(out),
                                     self.model.schedule, gen)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss is {value} at step {self.step} ({self.config.phase})")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer_step(self.optimizer)
        self.step += 1
        self.history.append({"step": self.step, "loss": value, "lr": self.config.lr,
                             "phase": self.config.phase})
        return value

    def run(self, steps: int | None = None) -> Checkpoint:
        """Train until ``steps`` (default ``config.steps``) total steps in this phase."""
        target = self.config.steps if steps is None else steps
        while self.step < target:
            loss = self.train_step()
            if self.step % 500 == 0:
                log.info("%s step %d loss %.4f", self.config.phase, self.step, loss)
        if self.log_path:
            write_log(self.log_path, self.history, append=self.init.phase == self.config.phase)
        return self.checkpoint()

    def checkpoint(self) -> Checkpoint:
        if self.step == 0 and self.init.phase != self.config.phase:
            return self.init
        return snapshot(self.model, phase=self.config.phase, step=self.step,
                        seed=self.config.seed, train_config=self.config,
                        moments=_export_moments(self.model, self.optimizer),
                        oracle=self.init.oracle, oracle_K=self.init.oracle_K)


def write_log(path: Path, rows: list[dict], append: bool = False) -> None:
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "loss", "lr", "phase"])
        if new:
            writer.writeheader()
        writer.writerows(rows)


def pretrain_unconditional(dataset: GridSet, config: TrainConfig, init: Checkpoint,
                           log_path=None) -> Checkpoint:
    if config.phase != "unconditional":
        raise ConfigError("pretrain_unconditional needs phase=unconditional")
    return Trainer(dataset, config, init, log_path).run()


def train_conditional(dataset: GridSet, config: TrainConfig, init: Checkpoint,
                      log_path=None) -> Checkpoint:
    if config.phase != "conditional":
        raise ConfigError("train_conditional needs phase=conditional")
    return Trainer(dataset, config, init, log_path).run()


def with_phase(config: TrainConfig, phase: str, **kw) -> TrainConfig:
    return dataclasses.replace(config, phase=phase, **kw)
