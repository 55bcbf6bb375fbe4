"""
Fréchet feature distance between Gaussian fits of two image sets.

Distances are only comparable between runs that use the same extractor.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg

from app.core.errors import DataError, NumericError, ShapeError
from app.diffusion.rng import Rng

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-6


@dataclass
class FeatureStats:
    mu: np.ndarray          # [d]
    cov: np.ndarray         # [d, d]
    n: int

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])


class RandomProjectionExtractor:
    """
    Training-free features: channel mean, adaptive average pool to a fixed
    grid, fixed Gaussian projection, tanh.
    """

    def __init__(self, seed: int = 0, dim: int = 64, pool: int = 16):
        self.seed = seed
        self.dim = dim
        self.pool = pool
        self.weight = Rng(seed).split("features").normal((dim, pool * pool), dtype=torch.float64).numpy()
        self.weight /= np.sqrt(pool * pool)

    @property
    def name(self) -> str:
        return f"random-projection(seed={self.seed}, dim={self.dim}, pool={self.pool})"

    def __call__(self, image: torch.Tensor, image_id: Optional[str] = None) -> np.ndarray:
        gray = image.detach().cpu().to(torch.float64).mean(dim=0, keepdim=True)[None]
        pooled = F.adaptive_avg_pool2d(gray, self.pool).reshape(-1).numpy()
        return np.tanh(self.weight @ pooled)


class FeatureFileExtractor:
    """Looks up precomputed vectors by image id in an .npz file."""

    def __init__(self, path: str):
        self.path = str(path)
        try:
            with np.load(self.path) as data:
                self.table = {k: np.asarray(data[k], dtype=np.float64).ravel() for k in data.files}
        except FileNotFoundError as e:
            raise DataError(f"missing feature file: {path}") from e
        if not self.table:
            raise DataError(f"feature file {path} is empty")

    @property
    def name(self) -> str:
        return f"feature-file({Path(self.path).name})"

    def __call__(self, image: torch.Tensor, image_id: Optional[str] = None) -> np.ndarray:
        if image_id not in self.table:
            raise DataError(f"feature file {self.path} has no entry for {image_id!r}")
        return self.table[image_id]


Extractor = Callable[..., np.ndarray]


def feature_stats(
    images: Sequence[torch.Tensor],
    extractor: Extractor,
    ids: Optional[Sequence[str]] = None,
) -> FeatureStats:
    """Sample mean and unbiased covariance of the extractor outputs."""
    if len(images) < 2:
        raise DataError(f"feature statistics need at least 2 images, got {len(images)}")
    ids = list(ids) if ids is not None else [None] * len(images)
    feats = np.stack([np.asarray(extractor(img, i), dtype=np.float64) for img, i in zip(images, ids)])
    mu = feats.mean(axis=0)
    centered = feats - mu
    cov = centered.T @ centered / (feats.shape[0] - 1)
    return FeatureStats(mu=mu, cov=0.5 * (cov + cov.T), n=feats.shape[0])


def _psd_sqrt(mat: np.ndarray, what: str) -> np.ndarray:
    w, v = linalg.eigh(0.5 * (mat + mat.T))
    if w.min() < -PSD_TOLERANCE:
        raise NumericError(f"{what} is not positive semi-definite (eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _trace_sqrt(mat: np.ndarray, what: str) -> float:
    w = linalg.eigvalsh(0.5 * (mat + mat.T))
    if w.min() < -PSD_TOLERANCE:
        raise NumericError(f"{what} is not positive semi-definite (eigenvalue {w.min():.3e})")
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(s1: FeatureStats, s2: FeatureStats) -> float:
    """
    ||mu1 - mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^(1/2)).

    The cross term is evaluated as Tr((C1^(1/2) C2 C1^(1/2))^(1/2)), which has
    the same eigenvalues and stays symmetric.
    """
    if s1.dim != s2.dim:
        raise ShapeError(f"feature dims differ: {s1.dim} vs {s2.dim}")
    root1 = _psd_sqrt(s1.cov, "first covariance")
    _psd_sqrt(s2.cov, "second covariance")
    cross = _trace_sqrt(root1 @ s2.cov @ root1, "covariance product")
    diff = s1.mu - s2.mu
    d = float(diff @ diff + np.trace(s1.cov) + np.trace(s2.cov) - 2.0 * cross)
    if d < -PSD_TOLERANCE:
        logger.warning(f"Fréchet distance {d:.3e} below zero beyond tolerance")
    return max(d, 0.0)
