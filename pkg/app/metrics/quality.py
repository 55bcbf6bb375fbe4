"""
Full-reference image quality: PSNR and windowed SSIM.

Both take images on a [0, data_range] scale; the trainer evaluates on
denormalized [0, 1] images with max_val = 1.
"""
import math
from typing import Union

import numpy as np
import torch
from scipy.signal import convolve2d

from app.core.errors import ShapeError

ImageLike = Union[np.ndarray, torch.Tensor]

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def as_array(img: ImageLike) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().to(torch.float64).numpy()
    return np.asarray(img, dtype=np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image shapes {a.shape} and {b.shape} differ")


def psnr(a: ImageLike, b: ImageLike, max_val: float = 1.0) -> float:
    """10 * log10(max_val^2 / MSE) in dB, capped at 99 dB."""
    a, b = as_array(a), as_array(b)
    _check_pair(a, b)
    if max_val <= 0:
        raise ValueError(f"max_val must be positive, got {max_val}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: np.ndarray, data_range: float) -> float:
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(x):
        return convolve2d(x, window, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(
    a: ImageLike,
    b: ImageLike,
    data_range: float = 1.0,
    window_size: int = SSIM_WINDOW,
    sigma: float = SSIM_SIGMA,
) -> float:
    """
    Mean local SSIM with a Gaussian window, valid positions only.

    Args:
        a, b: [H, W] or [C, H, W] images; channels are averaged
        data_range: dynamic range L of the pixel values
        window_size: side of the Gaussian window
        sigma: Gaussian standard deviation

    Returns:
        SSIM in [-1, 1]
    """
    a, b = as_array(a), as_array(b)
    _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim expects [H, W] or [C, H, W], got {a.shape}")
    if a.shape[1] < window_size or a.shape[2] < window_size:
        raise ShapeError(f"image {a.shape[1:]} smaller than the {window_size}x{window_size} window")
    window = gaussian_window(window_size, sigma)
    return float(np.mean([_ssim_channel(a[c], b[c], window, data_range) for c in range(a.shape[0])]))
