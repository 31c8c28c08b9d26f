"""Reverse-time samplers: DDPM ancestral steps and forward-Euler ODE integration."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .denoiser import EPSILON, VECTOR_FIELD, DenoiserModel, as_batch
from .schedule import NoiseSchedule

DEFAULT_FLOW_STEPS = 10


def ddpm_step(model: DenoiserModel, z_t, t: int, obs_stack, sched: NoiseSchedule,
              rng: Optional[np.random.Generator] = None, sigma: Optional[float] = None) -> np.ndarray:
    """One ancestral step z_t -> z_{t-1}.

    ``sigma`` defaults to sqrt(beta_t), and to 0 at t = 1 so the last step is
    deterministic.
    """
    sched.check_step(t)
    if model.mode != EPSILON:
        raise ValueError("ddpm_step needs an epsilon-mode model")
    single = np.ndim(z_t) == 1
    z = as_batch(z_t)
    obs = as_batch(obs_stack).reshape(z.shape[0], -1)
    beta, alpha, ab = sched.beta(t), sched.alpha(t), sched.alpha_bar(t)
    eps_hat = model.predict(z, np.full(z.shape[0], t), obs)
    mean = (z - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
    if sigma is None:
        sigma = 0.0 if t == 1 else np.sqrt(beta)
    if sigma > 0:
        if rng is None:
            raise ValueError("stochastic step needs an rng")
        mean = mean + sigma * rng.standard_normal(mean.shape)
    return mean[0] if single else mean


def ddpm_sample(model: DenoiserModel, obs_stack, sched: NoiseSchedule, rng: np.random.Generator,
                z_T=None) -> np.ndarray:
    """Run the full reverse chain from z_T ~ N(0, I)."""
    obs = as_batch(obs_stack, model.cond_dims)
    z = rng.standard_normal((obs.shape[0], model.chunk_dim)) if z_T is None else as_batch(z_T)
    for t in range(sched.T, 0, -1):
        z = ddpm_step(model, z, t, obs, sched, rng)
    return z


def euler_integrate(model: DenoiserModel, z0, obs_stack, steps: int = DEFAULT_FLOW_STEPS) -> np.ndarray:
    """Forward-Euler integration of the learned field from tau=0 to tau=1.

    z <- z + delta * field_sign * v(z, tau, obs) at tau = 0, delta, ..., 1 - delta.
    ``field_sign`` is -1 for fields trained on the ``eps - a`` target, whose
    direction points from data towards noise.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if model.mode != VECTOR_FIELD:
        raise ValueError("euler_integrate needs a vector_field-mode model")
    single = np.ndim(z0) == 1
    z = as_batch(z0).copy()
    obs = as_batch(obs_stack).reshape(z.shape[0], -1)
    delta = 1.0 / steps
    for k in range(steps):
        tau = np.full(z.shape[0], k * delta)
        z = z + delta * model.field_sign * model.predict(z, tau, obs)
    return z[0] if single else z
