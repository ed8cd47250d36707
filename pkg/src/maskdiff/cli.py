"""Command line entry point: gen-data, train, sample, eval, bench, schedule.

Exit codes: 0 success, 2 configuration error, 1 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import bench, evalmetrics, masking
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (DecodeConfig, ModelConfig, RunConfig, TrainConfig, format_kv,
                     read_kv_file, to_dict)
from .decoder import Sampler
from .diffusion import cfg_scale
from .errors import ConfigError
from .synthdata import (GridSet, SynthSpec, gen_dataset, oracle_for, read_grids,
                        spec_from_manifest, write_grids)
from .trainer import Trainer, fresh_checkpoint

log = logging.getLogger("maskdiff")


def _default_seed() -> int:
    raw = os.environ.get("IMPACT_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"IMPACT_SEED must be an integer, got {raw!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser, *classes) -> None:
    """One ``--key-name`` flag per config field; values stay strings until resolution."""
    p.add_argument("--config", help="flat key=value config file")
    for cls in classes:
        group = p.add_argument_group(cls.__name__)
        for f in fields(cls):
            if f.name == "seed":
                continue
            group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name,
                               metavar=f.name.upper(), default=None)


def _flag_layer(args) -> dict[str, str]:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def _resolve(args, *base: dict) -> RunConfig:
    file_layer = read_kv_file(args.config) if getattr(args, "config", None) else {}
    flags = _flag_layer(args)
    flags["seed"] = str(args.seed)
    cfg = RunConfig.resolve(*base, file_layer, flags)
    text = format_kv(cfg.flat())
    sys.stderr.write("# resolved config\n" + text)
    return cfg


def _write_csv(path, header, rows) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


# --- subcommands -----------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SynthSpec(K=args.K, noise_std=args.noise_std, height=args.height, width=args.width,
                     channels=args.channels, seed=args.seed, phase_jitter=args.phase_jitter)
    data = gen_dataset(spec, args.n)
    write_grids(args.out, data, spec.K, spec.seed,
                extra={"noise_std": spec.noise_std, "phase_jitter": spec.phase_jitter})
    log.info("wrote %d grids to %s", len(data), args.out)
    return 0


def cmd_train(args) -> int:
    data, meta = read_grids(args.data)
    spec = spec_from_manifest(meta)
    init = load_checkpoint(args.init) if args.init else None
    if init is not None:
        base = {k: str(v) for k, v in to_dict(init.model_config).items()}
    else:
        base = {"height": spec.height, "width": spec.width, "channels": spec.channels,
                "num_classes": spec.K}
    cfg = _resolve(args, base)
    if init is not None and cfg.model != init.model_config:
        raise ConfigError("model settings differ from the --init checkpoint")
    if init is None:
        init = fresh_checkpoint(cfg.model, seed=args.seed, oracle=oracle_for(spec), oracle_K=spec.K)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_kv(cfg.flat()))
    trainer = Trainer(data, cfg.train, init, log_path=out / "train_log.csv")
    ckpt = trainer.run()
    save_checkpoint(ckpt, out)
    if trainer.history:
        log.info("%s: %d steps, final loss %.5f", cfg.train.phase, trainer.step,
                 trainer.history[-1]["loss"])
    return 0


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    base = {k: str(v) for k, v in to_dict(ckpt.model_config).items()}
    cfg = _resolve(args, base)
    if cfg.model != ckpt.model_config:
        raise ConfigError("model settings cannot be changed at sampling time")
    if args.class_id is None:
        conditions = [None] * args.n
    elif args.class_id == "all":
        conditions = [i % cfg.model.num_classes for i in range(args.n)]
    else:
        try:
            c = int(args.class_id)
        except ValueError:
            raise ConfigError(f"bad class id {args.class_id!r}") from None
        if not 0 <= c < cfg.model.num_classes:
            raise ConfigError(f"class id {c} outside [0, {cfg.model.num_classes})")
        conditions = [c] * args.n
    sampler = Sampler.from_checkpoint(ckpt)
    d = cfg.decode
    grids = sampler.generate(conditions, d.dec_iters, d.diff_steps, d.beta_max, args.seed,
                             batch_size=args.batch_size)
    labels = np.array([-1 if c is None else c for c in conditions])
    write_grids(args.out, GridSet(grids, labels), cfg.model.num_classes, args.seed,
                extra={"dec_iters": d.dec_iters, "diff_steps": d.diff_steps,
                       "beta_max": d.beta_max})
    return 0


def cmd_eval(args) -> int:
    gen, _ = read_grids(args.gen)
    real, meta = read_grids(args.real)
    if gen.grids.shape[1:] != real.grids.shape[1:]:
        raise ConfigError("generated and real grids have different shapes")
    if args.ckpt:
        oracle = load_checkpoint(args.ckpt).oracle
        if oracle is None:
            raise ConfigError(f"checkpoint {args.ckpt} carries no oracle")
    else:
        oracle = oracle_for(spec_from_manifest(meta), args.n_features, args.oracle_seed)
    m = evalmetrics.evaluate(gen.grids, gen.labels, real.grids, oracle)
    cols = ["fd", "kl", "is", "mean_alignment"]
    line = ",".join(f"{m[c]:.6g}" for c in cols)
    if args.header:
        print(",".join(cols))
    print(line)
    if args.out:
        Path(args.out).write_text(",".join(cols) + "\n" + line + "\n")
    return 0


def cmd_bench(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    sampler = Sampler.from_checkpoint(ckpt)
    cond = None if args.class_id < 0 else args.class_id
    records = bench.run_grid(sampler, args.iters, args.steps, args.batch, args.repeats,
                             args.seed, args.beta_max, cond)
    bench.export_csv(records, args.out)
    return 0


def cmd_schedule(args) -> int:
    if args.N < 1:
        raise ConfigError("N must be >= 1")
    if args.beta_max < 1:
        raise ConfigError("beta_max must be >= 1")
    rows = []
    for t in range(args.T + 1):
        pc = masking.pred_count(t, args.T, args.N) if t else 0
        rows.append([t, repr(masking.gamma(t, args.T)), masking.masked_count(t, args.T, args.N),
                     pc, repr(cfg_scale(t, args.T, args.beta_max))])
    _write_csv(args.out, ["t", "gamma", "mu", "pred_count", "beta_cfg"], rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    seed_default = _default_seed()

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=seed_default,
                       help="run seed (default: $IMPACT_SEED or 0)")
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic grid dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--phase-jitter", type=float, default=0.0)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--channels", type=int, default=4)

    p = add("train", cmd_train, "run one training phase")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory to write")
    p.add_argument("--init", help="checkpoint directory to start from")
    _add_config_flags(p, ModelConfig, TrainConfig)

    p = add("sample", cmd_sample, "decode grids from a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--class-id", default=None, help="class id, 'all' (round-robin) or omit for null")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--T", dest="cfg_dec_iters", default=None, help="decoding iterations")
    p.add_argument("--steps", dest="cfg_diff_steps", default=None, help="diffusion steps")
    _add_config_flags(p, DecodeConfig)

    p = add("eval", cmd_eval, "compare a generated grid set against a real one")
    p.add_argument("--gen", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--ckpt", help="use the oracle stored in this checkpoint")
    p.add_argument("--oracle-seed", type=int, default=0)
    p.add_argument("--n-features", type=int, default=16)
    p.add_argument("--header", action="store_true", help="print the column header first")
    p.add_argument("--out")

    p = add("bench", cmd_bench, "latency/throughput grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=_int_list, default=list(bench.DEFAULT_ITERS))
    p.add_argument("--steps", type=_int_list, default=list(bench.DEFAULT_STEPS))
    p.add_argument("--batch", type=_int_list, default=list(bench.DEFAULT_BATCHES))
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--beta-max", type=float, default=5.0)
    p.add_argument("--class-id", type=int, default=0, help="-1 for unconditional")

    p = add("schedule", cmd_schedule, "dump mask and guidance schedules as CSV")
    p.add_argument("--T", type=int, default=64)
    p.add_argument("--N", type=int, default=32)
    p.add_argument("--beta-max", type=float, default=5.0)
    p.add_argument("--out")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        parser = build_parser()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.use_deterministic_algorithms(True)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
