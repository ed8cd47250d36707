"""Latency and throughput over the (decoding iterations x diffusion steps x batch) grid."""
from __future__ import annotations

import csv
import itertools
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .decoder import Sampler, item_seeds
from .diffusion import WorkCounter
from .errors import ConfigError, InvariantError
from .trainer import Checkpoint

DEFAULT_ITERS = (4, 8, 16, 32, 64)
DEFAULT_STEPS = (25, 50, 100, 150, 200)
DEFAULT_BATCHES = (1, 8)
FIELDS = ["dec_iters", "diff_steps", "batch_size", "wall_seconds", "throughput", "repeats", "seed"]


@dataclass(frozen=True, order=True)
class BenchRecord:
    dec_iters: int
    diff_steps: int
    batch_size: int
    wall_seconds: float
    throughput: float
    repeats: int
    seed: int

    def __post_init__(self):
        if not self.wall_seconds > 0:
            raise InvariantError(f"wall_seconds must be > 0, got {self.wall_seconds}")

    @classmethod
    def make(cls, dec_iters, diff_steps, batch_size, wall_seconds, repeats, seed) -> "BenchRecord":
        if not wall_seconds > 0:
            raise InvariantError(f"wall_seconds must be > 0, got {wall_seconds}")
        return cls(dec_iters, diff_steps, batch_size, wall_seconds,
                   batch_size / wall_seconds, repeats, seed)

    @property
    def per_sample_seconds(self) -> float:
        return self.wall_seconds / self.batch_size


def _clock():
    info = time.get_clock_info("perf_counter")
    if not info.monotonic or info.resolution <= 0:
        raise RuntimeError("no usable monotonic timing clock")
    return time.perf_counter


def expected_work(n_tokens: int, T: int, steps: int, guided: bool, batch: int = 1) -> WorkCounter:
    """Closed-form head and encoder evaluation counts for one batched decode."""
    f = 2 if guided else 1
    return WorkCounter(head_evals=batch * n_tokens * steps * f, encoder_evals=batch * T * f)


def run_grid(model: Sampler | Checkpoint, iters_set: Sequence[int] = DEFAULT_ITERS,
             steps_set: Sequence[int] = DEFAULT_STEPS, batch_sizes: Sequence[int] = DEFAULT_BATCHES,
             repeats: int = 5, seed: int = 0, beta_max: float = 5.0,
             condition: int | None = 0) -> list[BenchRecord]:
    """Time every cell: one counted warmup decode, then the median of ``repeats`` timed decodes.

    Timed runs are interleaved round-robin over the cells, so a slow stretch on a
    shared machine spreads over all cells instead of skewing a few neighbours.
    """
    if not iters_set or not steps_set or not batch_sizes:
        raise ConfigError("iters, steps and batch sets must be nonempty")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    sampler = model if isinstance(model, Sampler) else Sampler.from_checkpoint(model)
    clock = _clock()
    guided = condition is not None and beta_max != 1.0
    cells = list(itertools.product(sorted(set(iters_set)), sorted(set(steps_set)),
                                   sorted(set(batch_sizes))))
    for T, steps, B in cells:
        counter = WorkCounter()
        sampler.decode_tokens([condition] * B, T, steps, beta_max, item_seeds(seed, B),
                              counter=counter)
        want = expected_work(sampler.cfg.n_tokens, T, steps, guided, B)
        if counter != want:
            raise InvariantError(f"work counters {counter} != closed form {want} "
                                 f"at T={T} steps={steps} batch={B}")
    times: dict[tuple, list[float]] = {cell: [] for cell in cells}
    for _ in range(repeats):
        for T, steps, B in cells:
            conds, seeds = [condition] * B, item_seeds(seed, B)
            t0 = clock()
            sampler.decode_tokens(conds, T, steps, beta_max, seeds)
            times[(T, steps, B)].append(clock() - t0)
    records = [BenchRecord.make(T, steps, B, statistics.median(times[(T, steps, B)]), repeats, seed)
               for T, steps, B in cells]
    return sorted(records)


def export_csv(records: Sequence[BenchRecord], path: str | Path, workers: int | None = None) -> Path:
    if not records:
        raise ConfigError("no benchmark records to export")
    path = Path(path)
    workers = torch.get_num_threads() if workers is None else workers
    with open(path, "w", newline="") as fh:
        fh.write(f"# workers={workers}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FIELDS)
        for r in records:
            writer.writerow([r.dec_iters, r.diff_steps, r.batch_size, f"{r.wall_seconds:.6g}",
                             f"{r.throughput:.6g}", r.repeats, r.seed])
    return path


def read_csv(path: str | Path) -> list[BenchRecord]:
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    out = []
    for row in csv.DictReader(rows):
        out.append(BenchRecord(int(row["dec_iters"]), int(row["diff_steps"]), int(row["batch_size"]),
                               float(row["wall_seconds"]), float(row["throughput"]),
                               int(row["repeats"]), int(row["seed"])))
    return out
