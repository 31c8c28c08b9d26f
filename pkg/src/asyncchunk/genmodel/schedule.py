"""Discrete-time DDPM noise schedule and closed-form forward noising."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BadRange(ValueError):
    pass


class StepOutOfRange(IndexError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_step(self, t: int):
        if not 1 <= t <= self.T:
            raise StepOutOfRange(f"step {t} outside [1, {self.T}]")

    # 1-based accessors mirror the usual t = 1..T indexing
    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t - 1])


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=float)
    if betas.ndim != 1 or len(betas) < 1:
        raise BadRange("need at least one beta")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise BadRange(f"betas must lie in (0, 1), got range [{betas.min()}, {betas.max()}]")
    alphas = 1.0 - betas
    # sequential product so that alpha_bar[t] == alpha_bar[t-1] * alpha[t] holds bit-exactly
    alpha_bars = np.empty_like(alphas)
    acc = 1.0
    for i, a in enumerate(alphas):
        acc = acc * a
        alpha_bars[i] = acc
    return NoiseSchedule(betas, alphas, alpha_bars)


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02,
                  spacing: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise BadRange(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise BadRange(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if spacing != "linear":
        raise BadRange(f"unsupported spacing {spacing!r}")
    return schedule_from_betas(np.linspace(beta_min, beta_max, T))


def noise_sample(z0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Draw from q(z_t | z_0) given the unit Gaussian ``eps``."""
    sched.check_step(t)
    ab = sched.alpha_bar(t)
    return np.sqrt(ab) * np.asarray(z0, dtype=float) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=float)
