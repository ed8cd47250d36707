"""Checkpoint directories: ``manifest.json`` plus one raw float32 file per tensor.

Tensor files are little-endian, row-major, with no header; the manifest
carries names, shapes, configs, seed, phase, and step counts.
"""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, TrainConfig, from_dict, to_dict
from .errors import CheckpointError
from .synthdata import FeatureOracle
from .trainer import Checkpoint

FORMAT = "maskdiff-checkpoint"
VERSION = 1


def _fname(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".f32"


def _write_tensor(root: Path, name: str, value) -> dict:
    arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
    fname = _fname(name)
    arr.tofile(root / "tensors" / fname)
    return {"name": name, "shape": list(arr.shape), "dtype": "float32", "file": fname}


def _read_tensor(root: Path, entry: dict) -> np.ndarray:
    path = root / "tensors" / entry["file"]
    count = int(np.prod(entry["shape"])) if entry["shape"] else 1
    if not path.exists():
        raise CheckpointError(f"tensor {entry['name']!r}: missing file {path}")
    if path.stat().st_size != 4 * count:
        raise CheckpointError(f"tensor {entry['name']!r}: file {path} has "
                              f"{path.stat().st_size} bytes, expected {4 * count}")
    return np.fromfile(path, dtype="<f4").reshape(entry["shape"])


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    entries = [_write_tensor(root, f"param.{k}", v.detach().cpu().float().numpy())
               for k, v in ckpt.params.items()]
    moment_steps = {}
    for pname, st in (ckpt.moments or {}).items():
        entries.append(_write_tensor(root, f"adam.exp_avg.{pname}", st["exp_avg"].numpy()))
        entries.append(_write_tensor(root, f"adam.exp_avg_sq.{pname}", st["exp_avg_sq"].numpy()))
        moment_steps[pname] = float(st["step"])
    oracle = None
    if ckpt.oracle is not None:
        entries.append(_write_tensor(root, "oracle.weight", ckpt.oracle.weight))
        entries.append(_write_tensor(root, "oracle.bias", ckpt.oracle.bias))
        oracle = {"shape": list(ckpt.oracle.shape), "K": ckpt.oracle_K}
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "phase": ckpt.phase,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "model_config": to_dict(ckpt.model_config),
        "train_config": to_dict(ckpt.train_config) if ckpt.train_config else None,
        "moment_steps": moment_steps if ckpt.moments is not None else None,
        "oracle": oracle,
        "tensors": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_checkpoint(path: str | Path) -> Checkpoint:
    root = Path(path)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {mpath}: {exc}") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"{mpath}: unsupported format {manifest.get('format')!r} "
                              f"version {manifest.get('version')!r}")
    tensors = {e["name"]: _read_tensor(root, e) for e in manifest["tensors"]}
    params = {k[len("param."):]: torch.from_numpy(v.copy())
              for k, v in tensors.items() if k.startswith("param.")}
    moments = None
    if manifest.get("moment_steps") is not None:
        moments = {}
        for pname, step in manifest["moment_steps"].items():
            moments[pname] = {
                "step": torch.tensor(step, dtype=torch.float32),
                "exp_avg": torch.from_numpy(tensors[f"adam.exp_avg.{pname}"].copy()),
                "exp_avg_sq": torch.from_numpy(tensors[f"adam.exp_avg_sq.{pname}"].copy()),
            }
    oracle, oracle_K = None, None
    if manifest.get("oracle"):
        spec = manifest["oracle"]
        oracle = FeatureOracle(tensors["oracle.weight"], tensors["oracle.bias"], spec["shape"])
        oracle_K = spec.get("K")
        if oracle_K:
            oracle.fit_prototypes(oracle_K)
    tc = manifest.get("train_config")
    return Checkpoint(
        model_config=from_dict(ModelConfig, manifest["model_config"]),
        params=params,
        phase=manifest["phase"],
        step=int(manifest["step"]),
        seed=int(manifest["seed"]),
        train_config=from_dict(TrainConfig, tc) if tc else None,
        moments=moments,
        oracle=oracle,
        oracle_K=oracle_K,
    )
