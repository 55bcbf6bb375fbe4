"""
Forward corruption, Gaussian posterior, conditional reverse sampling and the
noise-prediction objective.
"""
import logging
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

from app.core.errors import NumericError, ShapeError
from app.diffusion.rng import Rng
from app.diffusion.schedule import NoiseSchedule

logger = logging.getLogger(__name__)

Tensor = torch.Tensor
TimeArg = Union[int, Tensor]

MIN_GAMMA = 1e-12


@dataclass
class PosteriorParams:
    mu: Tensor
    sigma_sq: float


@dataclass
class DiffusionSample:
    y_t: Tensor
    t: int


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def _per_row(values: np.ndarray, t: TimeArg, like: Tensor, s: NoiseSchedule) -> Tensor:
    """Gather values[t] as a tensor broadcastable against `like`."""
    if isinstance(t, Tensor) and t.ndim > 0:
        idx = t.detach().cpu().long()
        if idx.shape[0] != like.shape[0]:
            raise ShapeError(f"{idx.shape[0]} timesteps for a batch of {like.shape[0]}")
        if int(idx.min()) < 0 or int(idx.max()) > s.T:
            raise ShapeError(f"timesteps outside [0, {s.T}]")
        out = torch.from_numpy(values[idx.numpy()]).to(like.dtype)
        return out.reshape((-1,) + (1,) * (like.ndim - 1))
    t = int(t)
    if not (0 <= t <= s.T):
        raise ShapeError(f"timestep {t} outside [0, {s.T}]")
    return torch.tensor(float(values[t]), dtype=like.dtype)


def _check_range(t: TimeArg, s: NoiseSchedule) -> None:
    if isinstance(t, Tensor) and t.ndim > 0:
        lo, hi = int(t.min()), int(t.max())
    else:
        lo = hi = int(t)
    if lo < 1 or hi > s.T:
        raise ShapeError(f"timestep outside [1, {s.T}]: got [{lo}, {hi}]")


def q_sample(y0: Tensor, t: TimeArg, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """Closed-form corruption sqrt(g_t) * y0 + sqrt(1 - g_t) * eps."""
    _check_same_shape(y0, eps, "q_sample")
    _check_range(t, s)
    g = s.gamma_with_zero
    return _per_row(np.sqrt(g), t, y0, s) * y0 + _per_row(np.sqrt(1.0 - g), t, y0, s) * eps


def q_step(y_prev: Tensor, t: TimeArg, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """Single forward kernel sqrt(a_t) * y_{t-1} + sqrt(1 - a_t) * eps."""
    _check_same_shape(y_prev, eps, "q_step")
    _check_range(t, s)
    a = np.concatenate([[1.0], s.alpha])
    return _per_row(np.sqrt(a), t, y_prev, s) * y_prev + _per_row(np.sqrt(1.0 - a), t, y_prev, s) * eps


def posterior_coefficients(t: int, s: NoiseSchedule):
    """(coef_y0, coef_yt, sigma_sq) of q(y_{t-1} | y_t, y0), float64."""
    s._check_t(t)
    a_t = s.alpha_at(t)
    g_t = s.gamma_at(t)
    g_prev = s.gamma_at(t - 1)
    denom = 1.0 - g_t
    if denom <= 0.0:
        raise NumericError(f"gamma_{t} = {g_t} leaves no noise to remove")
    coef_y0 = math.sqrt(g_prev) * (1.0 - a_t) / denom
    coef_yt = math.sqrt(a_t) * (1.0 - g_prev) / denom
    sigma_sq = (1.0 - g_prev) * (1.0 - a_t) / denom
    return coef_y0, coef_yt, max(sigma_sq, 0.0)


def posterior_params(y0: Tensor, yt: Tensor, t: int, s: NoiseSchedule) -> PosteriorParams:
    """Mean and variance of the Gaussian posterior q(y_{t-1} | y_t, y0)."""
    _check_same_shape(y0, yt, "posterior_params")
    coef_y0, coef_yt, sigma_sq = posterior_coefficients(int(t), s)
    return PosteriorParams(mu=coef_y0 * y0 + coef_yt * yt, sigma_sq=sigma_sq)


def predict_y0(yt: Tensor, eps_hat: Tensor, t: TimeArg, s: NoiseSchedule) -> Tensor:
    """
    Invert q_sample: (y_t - sqrt(1 - g_t) * eps_hat) / sqrt(g_t).

    Evaluated in float64 and cast back to the dtype of y_t; 1 / sqrt(g_t)
    reaches the thousands at late timesteps.
    """
    _check_same_shape(yt, eps_hat, "predict_y0")
    _check_range(t, s)
    yt64, eps64 = yt.to(torch.float64), eps_hat.to(torch.float64)
    g_t = _per_row(s.gamma_with_zero, t, yt64, s)
    if float(g_t.min()) < MIN_GAMMA:
        raise NumericError(f"gamma_t below {MIN_GAMMA}: schedule too aggressive for T={s.T}")
    return ((yt64 - torch.sqrt(1.0 - g_t) * eps64) / torch.sqrt(g_t)).to(yt.dtype)


def _time_tensor(t: TimeArg, n: int) -> Tensor:
    if isinstance(t, Tensor) and t.ndim > 0:
        return t.long()
    return torch.full((n,), int(t), dtype=torch.long)


def training_loss(
    model,
    x: Tensor,
    y0: Tensor,
    t: TimeArg,
    eps: Tensor,
    s: NoiseSchedule,
    norm: str = "l2",
) -> Tensor:
    """
    Mean |eps - eps_hat|^p with eps_hat = model(x, q_sample(y0, t, eps), t).

    x and y0 are the source and target images of one pair or a batch of
    pairs; t is one timestep or one per row.
    """
    if x.shape[0] != y0.shape[0] or x.shape[-2:] != y0.shape[-2:]:
        raise ShapeError(f"source {tuple(x.shape)} and target {tuple(y0.shape)} are not aligned")
    p = {"l1": 1, "l2": 2}.get(norm.lower())
    if p is None:
        raise ValueError(f"Unknown loss norm: {norm}")
    yt = q_sample(y0, t, eps, s)
    eps_hat = model(x, yt, _time_tensor(t, y0.shape[0]))
    diff = (eps - eps_hat).abs()
    if p == 2:
        diff = diff * diff
    # 64-bit reduction
    return diff.to(torch.float64).mean().to(eps.dtype)


def _reverse_sigma_sq(t: int, s: NoiseSchedule, variance: str) -> float:
    if t == 1:
        return 0.0
    if variance == "beta":
        return 1.0 - s.alpha_at(t)
    return posterior_coefficients(t, s)[2]


@torch.no_grad()
def p_sample_step(
    model,
    x: Tensor,
    yt: Tensor,
    t: int,
    s: NoiseSchedule,
    rng: Rng,
    variance: str = "posterior",
) -> Tensor:
    """
    One ancestral step y_t -> y_{t-1} conditioned on the source x.

    The mean is the posterior mean around the clipped y0 estimate; noise is
    added for t > 1 only.
    """
    s._check_t(t)
    eps_hat = model(x, yt, _time_tensor(t, yt.shape[0]))
    y0_hat = predict_y0(yt, eps_hat, t, s).clamp(-1.0, 1.0)
    mu = posterior_params(y0_hat, yt, t, s).mu
    sigma_sq = _reverse_sigma_sq(t, s, variance)
    if t == 1 or sigma_sq == 0.0:
        return mu
    z = rng.normal(yt.shape, dtype=yt.dtype)
    return mu + math.sqrt(sigma_sq) * z


@torch.no_grad()
def sample(
    model,
    x: Tensor,
    s: NoiseSchedule,
    rng: Rng,
    variance: str = "posterior",
) -> Tensor:
    """
    Run the reverse chain t = T..1 from y_T ~ N(0, I).

    Noise for each timestep comes from rng.split(t), so the result is a pure
    function of (weights, x, rng seed/path).
    """
    n, _, h, w = x.shape
    target_channels = model.config.in_channels_target
    y = rng.split("init").normal((n, target_channels, h, w), dtype=x.dtype)
    for t in range(s.T, 0, -1):
        y = p_sample_step(model, x, y, t, s, rng.split(t), variance=variance)
    return y.clamp(-1.0, 1.0)
