"""
Intensity-spread statistics. Daytime thermal images spread their intensity
widely; nighttime ones concentrate it in a narrow band.
"""
from typing import Sequence

import numpy as np
import torch

from app.core.errors import DataError
from app.schemas.reports import HistogramComparison, SpreadStats

HISTOGRAM_BINS = 256


def _pool(images: Sequence[torch.Tensor]) -> np.ndarray:
    if len(images) == 0:
        raise DataError("intensity statistics need at least one image")
    return np.concatenate([np.asarray(img.detach().cpu().to(torch.float64)).ravel() for img in images])


def intensity_spread(images: Sequence[torch.Tensor]) -> SpreadStats:
    """Pooled std, interquartile range and 256-bin histogram over [-1, 1]."""
    values = _pool(images)
    q1, q3 = np.percentile(values, [25, 75])
    hist, _ = np.histogram(values, bins=HISTOGRAM_BINS, range=(-1.0, 1.0))
    return SpreadStats(std_dev=float(values.std()), iqr=float(q3 - q1), histogram=hist.tolist())


def compare_histograms(generated: SpreadStats, reference: SpreadStats) -> HistogramComparison:
    p = np.asarray(generated.histogram, dtype=np.float64)
    q = np.asarray(reference.histogram, dtype=np.float64)
    p /= max(p.sum(), 1.0)
    q /= max(q.sum(), 1.0)
    if reference.std_dev < 1e-12:
        ratio = 1.0 if generated.std_dev < 1e-12 else generated.std_dev / 1e-12
    else:
        ratio = generated.std_dev / reference.std_dev
    return HistogramComparison(intersection=float(np.minimum(p, q).sum()), contrast_ratio=float(ratio))
