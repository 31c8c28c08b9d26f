"""Minibatch SGD over the analytic gradients of the chunk objectives."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .denoiser import EPSILON, VECTOR_FIELD, DenoiserModel
from .objectives import ChunkSample, cfm_inputs, diffusion_inputs, pi0_inputs, regression_loss_grad
from .schedule import NoiseSchedule

logger = logging.getLogger(__name__)

OBJECTIVES = ("ddpm", "cfm", "pi0")
MOMENT_ROWS_PER_FEATURE = 4
MAX_MOMENT_PASSES = 64


class Diverged(RuntimeError):
    pass


@dataclass
class FitResult:
    model: DenoiserModel
    loss_trace: List[float] = field(default_factory=list)


DataSource = Union[ChunkSample, Callable[[int], Iterable[ChunkSample]]]


def _epoch_batches(data: DataSource, epoch: int, batch_size: int, rng: np.random.Generator):
    if callable(data):
        yield from data(epoch)
        return
    n = len(data)
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield data.take(order[start:start + batch_size])


def _feature_second_moment(model, data, draw, batch_size, rng, ridge):
    d = model.feature_map.dim
    G = np.zeros((d, d))
    n = 0
    # small datasets get several noise redraws so the estimate is not rank deficient
    for _ in range(MAX_MOMENT_PASSES):
        for batch in _epoch_batches(data, -1, batch_size, rng):
            z, t, obs, _ = draw(batch)
            phi = model.features(z, t, obs)
            G += phi.T @ phi
            n += phi.shape[0]
        if n >= MOMENT_ROWS_PER_FEATURE * d or n == 0:
            break
    G /= max(n, 1)
    G[np.diag_indices(d)] += ridge * max(np.trace(G) / d, 1e-12)
    return cho_factor(G)


def fit_denoiser(model: DenoiserModel, data: DataSource, objective: str, epochs: int, lr: float,
                 rng: np.random.Generator, batch_size: int = 64, sched: Optional[NoiseSchedule] = None,
                 pi0_s: float = 1.0, lr_decay: float = 1.0, precondition: bool = False,
                 ridge: float = 1e-2) -> FitResult:
    """Fit a copy of ``model`` by SGD; returns it with the per-epoch mean loss.

    ``data`` is either a stacked :class:`ChunkSample` (shuffled each epoch
    with ``rng``) or a callable mapping the epoch index to an iterable of
    batches, e.g. a dataset stream. ``lr_decay`` scales the step after every
    epoch.

    With ``precondition`` the gradient is right-multiplied by the inverse of
    the feature second-moment matrix (estimated from one or more noise-redrawn passes
    over the data, plus ``ridge`` times its mean eigenvalue). The loss is quadratic in
    the weights, so this removes the ill-conditioning of the random-feature
    basis; ``lr`` around 0.2 is then a sensible value. Batches smaller than
    the feature dimension get a proportionally shorter step.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if objective == "ddpm":
        if model.mode != EPSILON or sched is None:
            raise ValueError("ddpm objective needs an epsilon-mode model and a schedule")
    elif model.mode != VECTOR_FIELD:
        raise ValueError(f"{objective} objective needs a vector_field-mode model")
    model = model.copy()
    if objective == "ddpm":
        def draw(batch):
            return diffusion_inputs(model, batch, sched, rng)
    elif objective == "cfm":
        model.field_sign = 1.0

        def draw(batch):
            return cfm_inputs(model, batch, rng)
    else:
        model.field_sign = -1.0

        def draw(batch):
            return pi0_inputs(model, batch, rng, pi0_s)

    precond = _feature_second_moment(model, data, draw, batch_size, rng, ridge) if precondition else None
    trace = []
    step = lr
    for epoch in range(epochs):
        losses = []
        for batch in _epoch_batches(data, epoch, batch_size, rng):
            loss, grad = regression_loss_grad(model, *draw(batch))
            if not np.isfinite(loss):
                raise Diverged(f"non-finite loss at epoch {epoch}")
            losses.append(loss)
            if step:
                scale = 1.0
                if precond is not None:
                    # G is symmetric, so grad @ G^-1 == (G^-1 @ grad.T).T
                    grad = cho_solve(precond, grad.T).T
                    # whitened batch curvature grows like dim/batch once the batch is smaller than dim
                    scale = min(1.0, len(batch) / model.feature_map.dim)
                model.weights -= step * scale * grad
        if not losses:
            raise ValueError("data source produced no batches")
        trace.append(float(np.mean(losses)))
        logger.debug("epoch %d loss %.5f", epoch, trace[-1])
        step *= lr_decay
    if not np.all(np.isfinite(model.weights)):
        raise Diverged("non-finite weights after training")
    return FitResult(model, trace)
