"""Fréchet distance between Gaussian feature statistics.

The feature extractor is a frozen random projection (flatten, fixed linear
map to 64 dims, tanh), chosen for determinism and zero dependencies.  The
numbers it yields are NOT comparable to Inception-based FID; they only order
models within this package's toy protocol.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ditlab import rng as rngmod
from ditlab.diffcore import load_tensors, save_tensors
from ditlab.errors import ShapeError

FEATURE_DIM = 64
COVARIANCE_EPS = 1e-6
# eigenvalues of the symmetrized product more negative than this (relative
# to the largest) suggest ill-conditioned statistics worth flagging
NEGATIVE_EIG_WARN = 1e-8


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    count: int

    def __post_init__(self) -> None:
        if self.mu.ndim != 1:
            raise ShapeError(f"mu must be a vector, got shape {self.mu.shape}")
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise ShapeError(
                f"sigma must be {d}x{d} to match mu, got {self.sigma.shape}"
            )
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-10):
            raise ValueError("sigma must be symmetric")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def extract_features(latents: np.ndarray, extractor_seed: int) -> np.ndarray:
    """[n, ...] latents -> [n, 64] features via a frozen random projection."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim < 2:
        raise ShapeError(f"need a batch of latents, got shape {latents.shape}")
    flat = latents.reshape(latents.shape[0], -1)
    d_in = flat.shape[1]
    gen = rngmod.keyed_generator(extractor_seed, rngmod.FEATURE_MAP)
    projection = gen.standard_normal((d_in, FEATURE_DIM)) / np.sqrt(d_in)
    return np.tanh(flat @ projection)


def gaussian_stats(features: np.ndarray) -> FeatureStats:
    """Sample mean and unbiased covariance of a feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"features must be [n, d], got shape {features.shape}")
    n, d = features.shape
    if n < 2:
        raise ValueError(f"need at least 2 samples for a covariance, got {n}")
    if n < d:
        warnings.warn(
            f"covariance from {n} samples in {d} dims is rank-deficient; "
            "the distance leans on the epsilon regularizer",
            stacklevel=2,
        )
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False, ddof=1)
    sigma = (sigma + sigma.T) / 2.0
    return FeatureStats(mu=mu, sigma=sigma, count=n)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)).

    The cross term is computed as sqrt(Sa)*Sb*sqrt(Sa) symmetrized through an
    eigendecomposition; tiny negative eigenvalues from rounding are clipped
    at zero (warning past the threshold).  Both covariances get an epsilon
    ridge first.
    """
    if a.dim != b.dim:
        raise ShapeError(f"stats dimensions differ: {a.dim} vs {b.dim}")
    ridge = COVARIANCE_EPS * np.eye(a.dim)
    sigma_a = a.sigma + ridge
    sigma_b = b.sigma + ridge

    root_a = _psd_sqrt(sigma_a)
    product = root_a @ sigma_b @ root_a
    product = (product + product.T) / 2.0
    values = np.linalg.eigvalsh(product)
    scale = max(float(values[-1]), 1.0)
    if values[0] < -NEGATIVE_EIG_WARN * scale:
        warnings.warn(
            f"clipping negative eigenvalue {values[0]:.3e} in the covariance "
            "cross term",
            stacklevel=2,
        )
    cross = np.sum(np.sqrt(np.clip(values, 0.0, None)))

    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * cross)


def stats_to_file(path, stats: FeatureStats, extractor_seed: int) -> None:
    save_tensors(
        path,
        {"mu": stats.mu, "sigma": stats.sigma},
        meta={"count": stats.count, "extractor_seed": extractor_seed},
    )


def stats_from_file(path) -> tuple[FeatureStats, int]:
    arrays, meta = load_tensors(path)
    stats = FeatureStats(
        mu=arrays["mu"], sigma=arrays["sigma"], count=int(meta["count"])
    )
    return stats, int(meta["extractor_seed"])


def reference_stats(
    dataset,
    extractor_seed: int,
    count: int = 10_000,
    cache_dir: Optional[Path] = None,
) -> FeatureStats:
    """Feature statistics of the dataset's reference draw, cached by seed.

    The cache file is keyed by extractor seed, dataset seed, and count, so a
    stale file can never be served for different settings.
    """
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_path = cache_dir / (
            f"ref-stats-x{extractor_seed}-d{dataset.seed}-n{count}.ntc"
        )
        if cache_path.exists():
            stats, _ = stats_from_file(cache_path)
            return stats
    latents, _ = dataset.reference_set(count)
    stats = gaussian_stats(extract_features(latents, extractor_seed))
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        stats_to_file(cache_path, stats, extractor_seed)
    return stats
