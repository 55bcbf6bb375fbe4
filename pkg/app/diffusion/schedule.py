"""
Noise schedules: alpha_t, their running product gamma_t, and the
coefficients derived from them. All values are precomputed in float64.
"""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.errors import ShapeError
from app.schemas.configs import ScheduleConfig

COSINE_OFFSET = 0.008
ALPHA_CLIP = (0.001, 0.9999)


@dataclass(frozen=True)
class NoiseSchedule:
    """
    alpha[i] and gamma[i] hold alpha_t and gamma_t for t = i + 1.
    gamma_at(0) == 1 by convention.
    """
    kind: str
    T: int
    beta_start: float
    beta_end: float
    alpha: np.ndarray
    gamma: np.ndarray

    def _check_t(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not (lo <= int(t) <= self.T):
            raise ShapeError(f"timestep {t} outside [{lo}, {self.T}]")

    def alpha_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[int(t) - 1])

    def gamma_at(self, t: int) -> float:
        self._check_t(t, allow_zero=True)
        return 1.0 if int(t) == 0 else float(self.gamma[int(t) - 1])

    @property
    def gamma_with_zero(self) -> np.ndarray:
        """[gamma_0 = 1, gamma_1, ..., gamma_T]."""
        return np.concatenate([[1.0], self.gamma])

    def to_config(self, variance: str = "posterior") -> ScheduleConfig:
        return ScheduleConfig(
            kind=self.kind, T=self.T, beta_start=self.beta_start,
            beta_end=self.beta_end, variance=variance,
        )


def _cosine_gamma(T: int) -> np.ndarray:
    """Squared-cosine profile f(t)/f(0) for t = 0..T."""
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T) + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi * 0.5) ** 2
    return f / f[0]


def make_schedule(
    kind: str = "cosine",
    T: int = 100,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    """
    Build a linear or cosine noise schedule.

    Args:
        kind: "linear" or "cosine"
        T: number of timesteps (>= 1)
        beta_start: first beta of the linear profile
        beta_end: last beta of the linear profile

    Returns:
        NoiseSchedule whose gamma is the running product of alpha
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")

    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        alpha = 1.0 - betas
    elif kind == "cosine":
        profile = _cosine_gamma(T)
        alpha = np.clip(profile[1:] / profile[:-1], *ALPHA_CLIP)
    else:
        raise ValueError(f"Unknown schedule kind: {kind}")

    gamma = np.cumprod(alpha)
    return NoiseSchedule(
        kind=kind, T=T, beta_start=beta_start, beta_end=beta_end,
        alpha=alpha, gamma=gamma,
    )


def schedule_from_config(cfg: ScheduleConfig) -> NoiseSchedule:
    return make_schedule(cfg.kind, cfg.T, cfg.beta_start, cfg.beta_end)


def coefficient_sum_gap(s: NoiseSchedule, t: Optional[int] = None) -> np.ndarray:
    """
    sqrt(g_{t-1})(1 - a_t) + sqrt(a_t)(1 - g_{t-1}) - (1 - g_t) for each t.

    Zero exactly where the posterior mean of a constant image is that constant.
    """
    g_prev = s.gamma_with_zero[:-1]
    gap = np.sqrt(g_prev) * (1 - s.alpha) + np.sqrt(s.alpha) * (1 - g_prev) - (1 - s.gamma)
    if t is not None:
        s._check_t(t)
        return gap[int(t) - 1: int(t)]
    return gap
