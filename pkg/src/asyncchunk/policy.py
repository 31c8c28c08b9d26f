"""Observation-conditioned chunk policy built on a trained denoiser.

A :class:`ChunkPolicy` bundles a :class:`DenoiserModel` with everything
needed to go from raw observations to raw joint targets: the stack and chunk
horizons, normalisation statistics, the sampler choice and, for relative
chunks, the convention that the first ``action_dim`` entries of an
observation are the current joint angles.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import dataset as ds
from .genmodel import (DEFAULT_FLOW_STEPS, EPSILON, VECTOR_FIELD, ChunkSample, DenoiserModel, FitResult,
                       ddpm_sample, euler_integrate, fit_denoiser, make_schedule)

logger = logging.getLogger(__name__)

OBS_KEY = "observation.state"
ACTION_KEY = "action"


class DimMismatch(ValueError):
    pass


@dataclass(eq=False)
class ChunkPolicy:
    model: DenoiserModel

    def __post_init__(self):
        m = self.model.meta
        missing = {"h_o", "h_a", "obs_dim", "action_dim", "obs_mean", "obs_std", "chunk_mean", "chunk_std",
                   "objective"} - set(m)
        if missing:
            raise ValueError(f"checkpoint metadata lacks {sorted(missing)}")
        self.h_o, self.h_a = int(m["h_o"]), int(m["h_a"])
        self.obs_dim, self.action_dim = int(m["obs_dim"]), int(m["action_dim"])
        self.objective = m["objective"]
        self.relative = bool(m.get("relative", False))
        self.steps = int(m.get("steps", DEFAULT_FLOW_STEPS))
        self._obs_mean = np.asarray(m["obs_mean"], dtype=float)
        self._obs_std = np.asarray(m["obs_std"], dtype=float)
        self._chunk_mean = np.asarray(m["chunk_mean"], dtype=float)
        self._chunk_std = np.asarray(m["chunk_std"], dtype=float)
        if self.model.cond_dims != self.h_o * self.obs_dim:
            raise ValueError("model conditioning size disagrees with h_o * obs_dim")
        if self.model.chunk_dim != self.h_a * self.action_dim:
            raise ValueError("model output size disagrees with h_a * action_dim")
        self.sched = None
        if self.objective == "ddpm":
            s = m["schedule"]
            self.sched = make_schedule(int(s["T"]), float(s["beta_min"]), float(s["beta_max"]))

    @property
    def cond_dims(self) -> int:
        return self.model.cond_dims

    def describe(self) -> dict:
        return {"h_o": self.h_o, "h_a": self.h_a, "obs_dim": self.obs_dim, "action_dim": self.action_dim,
                "objective": self.objective, "relative": self.relative, "steps": self.steps}

    def infer_chunk(self, obs_stack, seed: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                    steps: Optional[int] = None) -> np.ndarray:
        """Sample one chunk of shape (h_a, action_dim) for a flattened observation stack."""
        obs = np.asarray(obs_stack, dtype=float).ravel()
        if obs.size != self.cond_dims:
            raise DimMismatch(f"observation stack has {obs.size} values, model expects {self.cond_dims}")
        if not np.all(np.isfinite(obs)):
            raise DimMismatch("observation stack contains non-finite values")
        if rng is None:
            rng = np.random.default_rng(seed)
        on = (obs - self._obs_mean) / self._obs_std
        if self.objective == "ddpm":
            z = ddpm_sample(self.model, on[None], self.sched, rng)[0]
        else:
            z = euler_integrate(self.model, rng.standard_normal(self.model.chunk_dim), on,
                                steps or self.steps)
        chunk = (z * self._chunk_std + self._chunk_mean).reshape(self.h_a, self.action_dim)
        if self.relative:
            chunk = chunk + obs[-self.obs_dim:][:self.action_dim]
        return chunk

    def save(self, path):
        self.model.save(path)

    @classmethod
    def load(cls, path) -> "ChunkPolicy":
        return cls(DenoiserModel.load(path))


def infer_chunk(obs_stack, policy: ChunkPolicy, steps: Optional[int] = None, seed: Optional[int] = None):
    return policy.infer_chunk(obs_stack, seed=seed, steps=steps)


def build_chunk_samples(root, h_o: int, h_a: int, relative: bool = True, obs_key: str = OBS_KEY,
                        action_key: str = ACTION_KEY) -> Tuple[np.ndarray, np.ndarray]:
    """Every frame of a dataset as an (observation stack, action chunk) pair.

    Windows that run off either end of an episode are edge-padded by the
    dataset reader. Relative chunks subtract the current joint angles.
    """
    lds = ds.LocalDataset(root)
    if lds.num_frames == 0:
        raise ds.EmptyDataset(f"no frames in {root}")
    fps = lds.info.fps
    delta = {obs_key: [(k - (h_o - 1)) / fps for k in range(h_o)],
             action_key: [k / fps for k in range(h_a)]}
    win = lds.gather(np.arange(lds.num_frames), delta)
    obs = win.values[obs_key].astype(float)
    act = win.values[action_key].astype(float)
    if relative:
        act = act - obs[:, -1:, :act.shape[2]]
    return obs.reshape(len(obs), -1), act.reshape(len(act), -1)


def _std(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, ds.NORM_EPS)


def train_policy(root, objective: str = "cfm", h_o: int = 2, h_a: int = 10, epochs: int = 15, lr: float = 0.2,
                 seed: int = 0, n_rff: int = 1024, bandwidth: float = 3.0, batch_size: int = 1024,
                 precondition: bool = True, ridge: float = 1e-2, lr_decay: float = 0.8,
                 steps: int = DEFAULT_FLOW_STEPS, T: int = 50, beta_min: float = 1e-4, beta_max: float = 0.2,
                 relative: bool = True, pi0_s: float = 1.0) -> Tuple[ChunkPolicy, FitResult]:
    """Fit a chunk policy on a dataset written by the demonstrator.

    Observation normalisation uses the dataset's persisted statistics;
    chunk statistics come from the training pairs themselves, since relative
    chunks are not a stored feature.
    """
    stats = ds.compute_stats(root)
    obs, chunks = build_chunk_samples(root, h_o, h_a, relative)
    obs_dim = obs.shape[1] // h_o
    action_dim = chunks.shape[1] // h_a
    o_st = stats[OBS_KEY]
    obs_mean = np.tile(np.asarray(o_st.mean, dtype=float).ravel(), h_o)
    obs_std = _std(np.tile(np.asarray(o_st.std, dtype=float).ravel(), h_o))
    chunk_mean, chunk_std = chunks.mean(0), _std(chunks.std(0))
    data = ChunkSample((obs - obs_mean) / obs_std, (chunks - chunk_mean) / chunk_std)
    sched = None
    if objective == "ddpm":
        sched = make_schedule(T, beta_min, beta_max)
        model = DenoiserModel.create(h_a * action_dim, h_o * obs_dim, EPSILON, T, n_rff, bandwidth, seed)
    else:
        model = DenoiserModel.create(h_a * action_dim, h_o * obs_dim, VECTOR_FIELD, 0, n_rff, bandwidth, seed)
    result = fit_denoiser(model, data, objective, epochs, lr, np.random.default_rng(seed + 1),
                          batch_size=batch_size, sched=sched, pi0_s=pi0_s, lr_decay=lr_decay,
                          precondition=precondition, ridge=ridge)
    result.model.meta = {
        "h_o": h_o, "h_a": h_a, "obs_dim": obs_dim, "action_dim": action_dim, "relative": relative,
        "objective": objective, "steps": steps, "fps": ds.load_info(root).fps,
        "obs_mean": obs_mean.tolist(), "obs_std": obs_std.tolist(),
        "chunk_mean": chunk_mean.tolist(), "chunk_std": chunk_std.tolist(),
        "loss_trace": result.loss_trace,
    }
    if sched is not None:
        result.model.meta["schedule"] = {"T": T, "beta_min": beta_min, "beta_max": beta_max}
    logger.info("trained %s policy on %d pairs, loss %.4f -> %.4f", objective, len(data),
                result.loss_trace[0], result.loss_trace[-1])
    return ChunkPolicy(result.model), result

