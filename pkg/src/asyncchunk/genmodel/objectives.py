"""Training objectives with exact gradients for the linear-head denoiser.

Every objective reduces to a least-squares regression of the model output
onto a target, so ``loss = mean_b ||pred_b - target_b||^2`` and
``grad = (2 / B) * (pred - target)^T Phi``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .denoiser import EPSILON, VECTOR_FIELD, DenoiserModel
from .schedule import BadRange, NoiseSchedule

PI0_BETA_A = 1.5
PI0_BETA_B = 1.0


@dataclass(eq=False)
class ChunkSample:
    """Observation stack and the action chunk it conditions.

    Fields are flat vectors for a single sample or (B, dim) arrays for a batch.
    """

    obs_stack: np.ndarray
    chunk: np.ndarray

    def __post_init__(self):
        self.obs_stack = np.asarray(self.obs_stack, dtype=float)
        self.chunk = np.asarray(self.chunk, dtype=float)

    def __len__(self):
        return 1 if self.chunk.ndim == 1 else self.chunk.shape[0]

    @staticmethod
    def stack(samples: Sequence["ChunkSample"]) -> "ChunkSample":
        return ChunkSample(np.stack([np.ravel(s.obs_stack) for s in samples]),
                           np.stack([np.ravel(s.chunk) for s in samples]))

    def take(self, idx) -> "ChunkSample":
        return ChunkSample(self.obs_stack[idx], self.chunk[idx])


Batch = Union[ChunkSample, Sequence[ChunkSample]]


def _as_arrays(batch: Batch) -> Tuple[np.ndarray, np.ndarray]:
    if not isinstance(batch, ChunkSample):
        if len(batch) == 0:
            raise ValueError("empty batch")
        batch = ChunkSample.stack(batch)
    obs = np.atleast_2d(batch.obs_stack)
    chunk = np.atleast_2d(batch.chunk)
    if chunk.shape[0] == 0:
        raise ValueError("empty batch")
    return obs, chunk


def regression_loss_grad(model: DenoiserModel, z, t, obs, target) -> Tuple[float, np.ndarray]:
    phi = model.features(z, t, obs)
    resid = phi @ model.weights.T - target
    B = resid.shape[0]
    loss = float(np.sum(resid ** 2) / B)
    grad = (2.0 / B) * resid.T @ phi
    return loss, grad


def diffusion_inputs(model: DenoiserModel, batch: Batch, sched: NoiseSchedule, rng: np.random.Generator):
    """Draw (z_t, t, obs, eps) for the conditional simplified DDPM loss."""
    if model.mode != EPSILON:
        raise ValueError("diffusion loss needs an epsilon-mode model")
    obs, a0 = _as_arrays(batch)
    B = a0.shape[0]
    t = rng.integers(1, sched.T + 1, size=B)
    eps = rng.standard_normal(a0.shape)
    ab = sched.alpha_bars[t - 1][:, None]
    z_t = np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps
    return z_t, t, obs, eps


def diffusion_loss_grad(model: DenoiserModel, batch: Batch, sched: NoiseSchedule,
                        rng: np.random.Generator) -> Tuple[float, np.ndarray]:
    """Conditional simplified DDPM loss: regress the injected noise."""
    return regression_loss_grad(model, *diffusion_inputs(model, batch, sched, rng))


def cfm_build(z0, z1, tau) -> Tuple[np.ndarray, np.ndarray]:
    """Straight-line interpolant and its (constant) target velocity."""
    z0 = np.asarray(z0, dtype=float)
    z1 = np.asarray(z1, dtype=float)
    if z0.shape != z1.shape:
        raise ValueError(f"shape mismatch {z0.shape} vs {z1.shape}")
    tau = np.asarray(tau, dtype=float)
    if z0.ndim == 2 and tau.ndim == 1:
        tau = tau[:, None]
    return (1.0 - tau) * z0 + tau * z1, z1 - z0


def uniform_tau(rng: np.random.Generator, size: int) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=size)


def cfm_inputs(model: DenoiserModel, batch: Batch, rng: np.random.Generator,
               tau_sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None):
    """Draw (z_tau, tau, obs, z1 - z0) with a standard Gaussian prior z0."""
    if model.mode != VECTOR_FIELD:
        raise ValueError("flow matching needs a vector_field-mode model")
    obs, z1 = _as_arrays(batch)
    tau = (tau_sampler or uniform_tau)(rng, z1.shape[0])
    z0 = rng.standard_normal(z1.shape)
    z_tau, target = cfm_build(z0, z1, tau)
    return z_tau, tau, obs, target


def cfm_loss_grad(model: DenoiserModel, batch: Batch, rng: np.random.Generator,
                  tau_sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None
                  ) -> Tuple[float, np.ndarray]:
    """Conditional flow matching loss."""
    return regression_loss_grad(model, *cfm_inputs(model, batch, rng, tau_sampler))


def pi0_tau_sample(s: float, rng: np.random.Generator, size=None):
    """Flow time from Beta(1.5, 1) rescaled onto [0, s]."""
    if not 0 < s <= 1:
        raise BadRange(f"truncation s must lie in (0, 1], got {s}")
    return s * rng.beta(PI0_BETA_A, PI0_BETA_B, size=size)


def pi0_inputs(model: DenoiserModel, batch: Batch, rng: np.random.Generator, s: float = 1.0):
    """Draw (tau*a + (1-tau)*eps, tau, obs, eps - a) with tau from the truncated Beta."""
    if model.mode != VECTOR_FIELD:
        raise ValueError("pi0 loss needs a vector_field-mode model")
    obs, a = _as_arrays(batch)
    tau = pi0_tau_sample(s, rng, size=a.shape[0])
    eps = rng.standard_normal(a.shape)
    noisy = tau[:, None] * a + (1.0 - tau[:, None]) * eps
    return noisy, tau, obs, eps - a


def pi0_loss_grad(model: DenoiserModel, batch: Batch, rng: np.random.Generator,
                  s: float = 1.0) -> Tuple[float, np.ndarray]:
    """pi0 flow loss: regress ``eps - a`` at the noisy chunk."""
    return regression_loss_grad(model, *pi0_inputs(model, batch, rng, s))
