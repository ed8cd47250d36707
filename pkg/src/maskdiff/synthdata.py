"""Procedural class-conditioned latent grids and a frozen feature oracle.

Class ``k`` of ``K`` is a sinusoidal stripe pattern with ``1 + k`` cycles across
the grid, oriented at ``k * pi / K``; each channel carries a fixed phase offset.
An optional per-sample phase jitter adds within-class variation that is shared
by every cell of a grid, so cells are correlated given the class.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class SynthSpec:
    K: int = 4
    noise_std: float = 0.1
    height: int = 16
    width: int = 8
    channels: int = 4
    seed: int = 0
    phase_jitter: float = 0.0

    def __post_init__(self) -> None:
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if min(self.height, self.width, self.channels) < 1:
            raise ConfigError(f"non-positive grid shape {self.shape}")
        if self.noise_std < 0 or self.phase_jitter < 0:
            raise ConfigError("noise_std and phase_jitter must be >= 0")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


def class_pattern(k: int, K: int, shape: tuple[int, int, int], phase: float = 0.0) -> np.ndarray:
    """Noiseless pattern for class ``k``, shape ``(H, W, ch)``."""
    if not 0 <= k < K:
        raise ConfigError(f"class id {k} outside [0, {K})")
    H, W, ch = shape
    freq = 1.0 + k
    theta = k * np.pi / K
    u = np.arange(H)[:, None, None] / H
    v = np.arange(W)[None, :, None] / W
    c = np.arange(ch)[None, None, :]
    arg = 2 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + c * np.pi / ch + phase
    return np.sin(arg)


@dataclass
class GridSet:
    """A set of latent grids with their class labels (``-1`` means no class)."""

    grids: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.grids = np.asarray(self.grids, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.grids.ndim != 4 or len(self.labels) != len(self.grids):
            raise ConfigError("GridSet needs grids (n, H, W, ch) and n labels")

    def __len__(self) -> int:
        return len(self.grids)

    def __iter__(self) -> Iterator[tuple[np.ndarray, int]]:
        for g, y in zip(self.grids, self.labels):
            yield g, int(y)


def gen_dataset(spec: SynthSpec, n: int) -> GridSet:
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(spec.seed)
    labels = rng.permutation(np.arange(n) % spec.K)
    phases = rng.uniform(-spec.phase_jitter, spec.phase_jitter, size=n)
    noise = rng.standard_normal((n, *spec.shape))
    grids = np.empty((n, *spec.shape))
    for j in range(n):
        grids[j] = class_pattern(int(labels[j]), spec.K, spec.shape, phases[j])
    grids += spec.noise_std * noise
    return GridSet(grids, labels)


class FeatureOracle:
    """Frozen random affine map of the flattened grid followed by ``tanh``.

    The optional classifier is a nearest-prototype softmax over squared
    feature distances, fit once on the noiseless class patterns.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray, shape: Sequence[int],
                 prototypes: np.ndarray | None = None, temperature: float | None = None):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.shape = tuple(int(s) for s in shape)
        if self.weight.shape != (len(self.bias), int(np.prod(self.shape))):
            raise ConfigError("oracle weight/bias/shape mismatch")
        self.prototypes = None if prototypes is None else np.asarray(prototypes, dtype=np.float64)
        self.temperature = temperature

    @classmethod
    def create(cls, shape: Sequence[int], n_features: int = 16, seed: int = 0) -> "FeatureOracle":
        rng = np.random.default_rng([seed, 0xFEA7])
        P = int(np.prod(shape))
        # float32-representable so the checkpoint copy is exact
        weight = (rng.standard_normal((n_features, P)) / np.sqrt(P)).astype(np.float32)
        bias = (0.1 * rng.standard_normal(n_features)).astype(np.float32)
        return cls(weight.astype(np.float64), bias.astype(np.float64), shape)

    @property
    def n_features(self) -> int:
        return len(self.bias)

    @property
    def fitted(self) -> bool:
        return self.prototypes is not None

    def _flat(self, grids: np.ndarray) -> tuple[np.ndarray, bool]:
        g = np.asarray(grids, dtype=np.float64)
        single = g.shape == self.shape
        if single:
            g = g[None]
        if g.shape[1:] != self.shape:
            raise ConfigError(f"grid shape {g.shape[1:]} does not match oracle shape {self.shape}")
        return g.reshape(len(g), -1), single

    def pre_activation(self, grids: np.ndarray) -> np.ndarray:
        flat, single = self._flat(grids)
        out = flat @ self.weight.T + self.bias
        return out[0] if single else out

    def features(self, grids: np.ndarray) -> np.ndarray:
        return np.tanh(self.pre_activation(grids))

    def lipschitz(self) -> float:
        """Bound on ``|f(a) - f(b)| / |a - b|``; tanh is 1-Lipschitz."""
        return float(np.linalg.norm(self.weight, 2))

    def fit_prototypes(self, K: int, temperature: float | None = None) -> "FeatureOracle":
        protos = np.stack([self.features(class_pattern(k, K, self.shape)) for k in range(K)])
        if temperature is None:
            d2 = ((protos[:, None] - protos[None]) ** 2).sum(-1)
            d2_min = d2[~np.eye(K, dtype=bool)].min()
            # soft enough that grids far from every prototype stay uncertain
            temperature = 0.4 * float(d2_min)
        self.prototypes = protos
        self.temperature = float(temperature)
        return self

    def classify(self, features: np.ndarray) -> np.ndarray:
        """Class posterior(s) for feature vector(s)."""
        if self.prototypes is None:
            raise RuntimeError("oracle classifier not initialized; call fit_prototypes")
        f = np.asarray(features, dtype=np.float64)
        single = f.ndim == 1
        f = np.atleast_2d(f)
        d2 = ((f[:, None, :] - self.prototypes[None]) ** 2).sum(-1)
        logits = -d2 / self.temperature
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return p[0] if single else p

    def classify_grids(self, grids: np.ndarray) -> np.ndarray:
        return self.classify(self.features(grids))

    def state(self) -> dict:
        return {"weight": self.weight, "bias": self.bias, "shape": list(self.shape),
                "prototypes": self.prototypes, "temperature": self.temperature}

    @classmethod
    def from_state(cls, state: dict) -> "FeatureOracle":
        return cls(state["weight"], state["bias"], state["shape"],
                   state.get("prototypes"), state.get("temperature"))


def oracle_for(spec: SynthSpec, n_features: int = 16, oracle_seed: int = 0) -> FeatureOracle:
    """Fitted oracle for a synthetic task; independent of the data seed."""
    return FeatureOracle.create(spec.shape, n_features, oracle_seed).fit_prototypes(spec.K)


# --- export format: raw little-endian float32 + a key=value manifest ---------

def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".txt")


def write_grids(path: str | Path, grids: GridSet, K: int, seed: int,
                extra: dict | None = None) -> None:
    path = Path(path)
    data = np.ascontiguousarray(grids.grids, dtype="<f4")
    data.tofile(path)
    H, W, ch = grids.grids.shape[1:]
    lines = {
        "format": "maskdiff-grids/1",
        "shape": f"{H},{W},{ch}",
        "K": K,
        "seed": seed,
        "count": len(grids),
        **(extra or {}),
        "labels": ",".join(str(int(y)) for y in grids.labels),
    }
    manifest_path(path).write_text("".join(f"{k}={v}\n" for k, v in lines.items()))


def read_grids(path: str | Path) -> tuple[GridSet, dict[str, str]]:
    path = Path(path)
    mpath = manifest_path(path)
    try:
        meta = dict(line.split("=", 1) for line in mpath.read_text().splitlines() if "=" in line)
    except OSError as exc:
        raise DataError(f"cannot read grid manifest {mpath}: {exc}") from None
    if meta.get("format") != "maskdiff-grids/1":
        raise DataError(f"{mpath}: unsupported grid format {meta.get('format')!r}")
    shape = tuple(int(s) for s in meta["shape"].split(","))
    count = int(meta["count"])
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != count * int(np.prod(shape)):
        raise DataError(f"{path}: expected {count} grids of {shape}, found {raw.size} floats")
    labels = [int(s) for s in meta["labels"].split(",")] if meta.get("labels") else []
    if len(labels) != count:
        raise DataError(f"{mpath}: {len(labels)} labels for {count} grids")
    return GridSet(raw.reshape(count, *shape).astype(np.float64), np.array(labels)), meta


def spec_from_manifest(meta: dict[str, str]) -> SynthSpec:
    H, W, ch = (int(s) for s in meta["shape"].split(","))
    return SynthSpec(K=int(meta["K"]), height=H, width=W, channels=ch,
                     seed=int(meta.get("seed", 0)),
                     noise_std=float(meta.get("noise_std", 0.0)),
                     phase_jitter=float(meta.get("phase_jitter", 0.0)))


def replace(spec: SynthSpec, **kw) -> SynthSpec:
    return dataclasses.replace(spec, **kw)
