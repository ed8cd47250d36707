"""Fréchet distance, class KL, Inception Score and alignment on oracle features.

KL direction: ``KL(mean real posterior || mean generated posterior)``, natural log.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .synthdata import FeatureOracle

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def gaussian_stats(features) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ConfigError("gaussian_stats needs at least 2 feature vectors")
    n, F = x.shape
    if n < F + 1:
        warnings.warn(f"{n} samples for {F} features: covariance is rank deficient", stacklevel=2)
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (n - 1)
    return GaussianStats(mu, (sigma + sigma.T) / 2, n)


def _psd_sqrt(m: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    if w.min() < -tol * max(1.0, abs(w).max()):
        raise ConfigError(f"covariance is not PSD (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats, tol: float = 1e-6) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` via symmetric eigensolves."""
    if a.mu.shape != b.mu.shape:
        raise ConfigError("feature dimensions differ")
    root_a = _psd_sqrt(a.sigma, tol)
    _psd_sqrt(b.sigma, tol)
    inner = root_a @ b.sigma @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    diff = a.mu - b.mu
    fd = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * tr_sqrt)
    if fd < -tol:
        raise ConfigError(f"negative Fréchet distance {fd}")
    return max(fd, 0.0)


def frechet_from_features(fa, fb) -> float:
    return frechet_distance(gaussian_stats(fa), gaussian_stats(fb))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_FLOOR, None)
    q = np.clip(np.asarray(q, dtype=np.float64), PROB_FLOOR, None)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def class_kl_from_probs(gen_probs: np.ndarray, real_probs: np.ndarray) -> float:
    if len(gen_probs) == 0 or len(real_probs) == 0:
        raise ConfigError("class_kl needs non-empty sets")
    return kl_divergence(np.mean(real_probs, axis=0), np.mean(gen_probs, axis=0))


def class_kl(gen_grids, real_grids, oracle: FeatureOracle) -> float:
    if len(gen_grids) == 0 or len(real_grids) == 0:
        raise ConfigError("class_kl needs non-empty sets")
    return class_kl_from_probs(oracle.classify_grids(gen_grids), oracle.classify_grids(real_grids))


def inception_score_from_probs(probs: np.ndarray) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_FLOOR, None)
    if p.ndim != 2 or len(p) < 2:
        raise ConfigError("inception_score needs at least 2 samples")
    marginal = p.mean(axis=0)
    kl = np.sum(p * (np.log(p) - np.log(marginal)), axis=1)
    return float(np.exp(kl.mean()))


def inception_score(gen_grids, oracle: FeatureOracle) -> float:
    if len(gen_grids) == 0:
        raise ConfigError("inception_score needs samples")
    return inception_score_from_probs(oracle.classify_grids(gen_grids))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def alignment_score(condition: int, grid: np.ndarray, oracle: FeatureOracle) -> float:
    """Cosine similarity between a grid's features and its class prototype's features."""
    if not oracle.fitted:
        raise RuntimeError("oracle classifier not initialized; call fit_prototypes")
    return cosine_similarity(oracle.prototypes[condition], oracle.features(grid))


def mean_alignment(conditions, grids, oracle: FeatureOracle) -> float:
    feats = oracle.features(np.asarray(grids))
    return float(np.mean([cosine_similarity(oracle.prototypes[c], f)
                          for c, f in zip(conditions, feats)]))


def evaluate(gen_grids, gen_labels, real_grids, oracle: FeatureOracle) -> dict[str, float]:
    """All four metrics; alignment is skipped (NaN) when generated labels are null."""
    gen_f, real_f = oracle.features(gen_grids), oracle.features(real_grids)
    labels = np.asarray(gen_labels)
    align = (mean_alignment(labels, gen_grids, oracle) if (labels >= 0).all() else float("nan"))
    return {
        "fd": frechet_from_features(real_f, gen_f),
        "kl": class_kl_from_probs(oracle.classify(gen_f), oracle.classify(real_f)),
        "is": inception_score_from_probs(oracle.classify(gen_f)),
        "mean_alignment": align,
    }
