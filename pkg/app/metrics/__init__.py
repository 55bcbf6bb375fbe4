from app.metrics.quality import psnr, ssim
from app.metrics.frechet import (
    FeatureFileExtractor,
    FeatureStats,
    RandomProjectionExtractor,
    feature_stats,
    frechet_distance,
)
from app.metrics.spread import compare_histograms, intensity_spread
from app.metrics.report import build_report, format_matrix, format_report

__all__ = [
    "psnr",
    "ssim",
    "FeatureFileExtractor",
    "FeatureStats",
    "RandomProjectionExtractor",
    "feature_stats",
    "frechet_distance",
    "compare_histograms",
    "intensity_spread",
    "build_report",
    "format_matrix",
    "format_report",
]
