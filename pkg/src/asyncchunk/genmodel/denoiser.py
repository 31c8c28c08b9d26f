"""Random-Fourier-feature regressor used as noise predictor or velocity field.

The network input is the concatenation ``(z, time embedding, obs_stack)``.
Features are ``[sqrt(2/D) cos(W x + b), x, 1]`` and, optionally, the outer
product of ``z`` with the time embedding so that fields of the form
``c(tau) * z`` are exactly representable. The head is linear, which gives
closed-form gradients for every objective.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

EPSILON = "epsilon"
VECTOR_FIELD = "vector_field"
MODES = (EPSILON, VECTOR_FIELD)

CKPT_MAGIC = b"LRGM0001"
_MODE_TAGS = {EPSILON: 0, VECTOR_FIELD: 1}
# magic, mode, flags, reserved, chunk_dim, cond_dim, time_steps, n_rff, seed, bandwidth, field_sign
_HEADER = struct.Struct("<8sBBHIIIIQdd")

TIME_EMBED_DIM = 5


class CheckpointError(ValueError):
    pass


def time_embedding(tau) -> np.ndarray:
    """Raw time plus four sinusoidal harmonics, shape (B, 5)."""
    tau = np.asarray(tau, dtype=float).reshape(-1, 1)
    return np.concatenate([tau, np.sin(np.pi * tau), np.cos(np.pi * tau),
                           np.sin(2 * np.pi * tau), np.cos(2 * np.pi * tau)], axis=1)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    z_dim: int
    cond_dim: int
    n_rff: int
    bandwidth: float
    seed: int
    freqs: np.ndarray
    phases: np.ndarray
    modulate: bool = True

    @classmethod
    def create(cls, z_dim: int, cond_dim: int, n_rff: int = 256, bandwidth: float = 1.0,
               seed: int = 0, modulate: bool = True) -> "FeatureMap":
        in_dim = z_dim + TIME_EMBED_DIM + cond_dim
        rng = np.random.default_rng(seed)
        freqs = rng.normal(0.0, 1.0 / bandwidth, size=(n_rff, in_dim))
        phases = rng.uniform(0.0, 2 * np.pi, size=n_rff)
        freqs.setflags(write=False)
        phases.setflags(write=False)
        return cls(z_dim, cond_dim, n_rff, float(bandwidth), int(seed), freqs, phases, modulate)

    @property
    def in_dim(self) -> int:
        return self.z_dim + TIME_EMBED_DIM + self.cond_dim

    @property
    def dim(self) -> int:
        d = self.n_rff + self.in_dim + 1
        if self.modulate:
            d += self.z_dim * TIME_EMBED_DIM
        return d

    def __call__(self, z, tau, obs) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        obs = np.asarray(obs, dtype=float).reshape(z.shape[0], self.cond_dim)
        temb = time_embedding(np.broadcast_to(np.asarray(tau, dtype=float).reshape(-1), (z.shape[0],)))
        x = np.concatenate([z, temb, obs], axis=1)
        blocks = [np.sqrt(2.0 / self.n_rff) * np.cos(x @ self.freqs.T + self.phases), x,
                  np.ones((z.shape[0], 1))]
        if self.modulate:
            blocks.append((z[:, :, None] * temb[:, None, :]).reshape(z.shape[0], -1))
        return np.concatenate(blocks, axis=1)


@dataclass(eq=False)
class DenoiserModel:
    """Linear head over a frozen feature map.

    ``mode`` is ``"epsilon"`` (noise predictor, time given as step ``t`` and
    embedded as ``t / time_steps``) or ``"vector_field"`` (time ``tau`` in
    [0, 1]). ``field_sign`` records the direction convention of a vector
    field: +1 when trained on ``z1 - z0``, -1 for the ``eps - a`` target.
    """

    feature_map: FeatureMap
    mode: str
    weights: np.ndarray
    time_steps: int = 0
    field_sign: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == EPSILON and self.time_steps < 1:
            raise ValueError("epsilon predictors need time_steps >= 1")
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.chunk_dim, self.feature_map.dim):
            raise ValueError(f"weights shape {self.weights.shape} != {(self.chunk_dim, self.feature_map.dim)}")

    @classmethod
    def create(cls, chunk_dim: int, cond_dim: int, mode: str = VECTOR_FIELD, time_steps: int = 0,
               n_rff: int = 256, bandwidth: float = 1.0, seed: int = 0, modulate: bool = True,
               field_sign: float = 1.0) -> "DenoiserModel":
        fmap = FeatureMap.create(chunk_dim, cond_dim, n_rff, bandwidth, seed, modulate)
        return cls(fmap, mode, np.zeros((chunk_dim, fmap.dim)), time_steps, field_sign)

    @property
    def chunk_dim(self) -> int:
        return self.feature_map.z_dim

    @property
    def cond_dims(self) -> int:
        return self.feature_map.cond_dim

    def _tau(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return t / self.time_steps if self.mode == EPSILON else t

    def features(self, z, t, obs) -> np.ndarray:
        return self.feature_map(z, self._tau(t), obs)

    def predict(self, z, t, obs) -> np.ndarray:
        """Evaluate the regressor; ``z`` and ``obs`` are (B, dim) or single vectors."""
        single = np.ndim(z) == 1
        out = self.features(z, t, obs) @ self.weights.T
        return out[0] if single else out

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.feature_map, self.mode, self.weights.copy(), self.time_steps,
                             self.field_sign, json.loads(json.dumps(self.meta)))

    # checkpoint I/O

    def to_bytes(self) -> bytes:
        fm = self.feature_map
        buf = io.BytesIO()
        buf.write(_HEADER.pack(CKPT_MAGIC, _MODE_TAGS[self.mode], int(fm.modulate), 0, fm.z_dim, fm.cond_dim,
                               self.time_steps, fm.n_rff, fm.seed, fm.bandwidth, self.field_sign))
        buf.write(np.ascontiguousarray(fm.freqs, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(fm.phases, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(self.weights, dtype="<f8").tobytes())
        meta = json.dumps(self.meta, sort_keys=True).encode()
        buf.write(struct.pack("<I", len(meta)))
        buf.write(meta)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DenoiserModel":
        if len(data) < _HEADER.size:
            raise CheckpointError("checkpoint truncated in header")
        (magic, mode_tag, flags, _, z_dim, cond_dim, time_steps, n_rff, seed, bandwidth,
         field_sign) = _HEADER.unpack_from(data)
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        modes = {v: k for k, v in _MODE_TAGS.items()}
        if mode_tag not in modes:
            raise CheckpointError(f"unknown mode tag {mode_tag}")
        in_dim = z_dim + TIME_EMBED_DIM + cond_dim
        modulate = bool(flags & 1)
        feat_dim = n_rff + in_dim + 1 + (z_dim * TIME_EMBED_DIM if modulate else 0)
        off = _HEADER.size
        sizes = (n_rff * in_dim, n_rff, z_dim * feat_dim)
        need = off + 8 * sum(sizes) + 4
        if len(data) < need:
            raise CheckpointError("checkpoint truncated in arrays")
        arrays = []
        for n in sizes:
            arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float))
            off += 8 * n
        (meta_len,) = struct.unpack_from("<I", data, off)
        off += 4
        if len(data) < off + meta_len:
            raise CheckpointError("checkpoint truncated in metadata")
        meta = json.loads(data[off:off + meta_len].decode()) if meta_len else {}
        freqs = arrays[0].reshape(n_rff, in_dim)
        phases = arrays[1]
        freqs.setflags(write=False)
        phases.setflags(write=False)
        fmap = FeatureMap(z_dim, cond_dim, n_rff, bandwidth, seed, freqs, phases, modulate)
        return cls(fmap, modes[mode_tag], arrays[2].reshape(z_dim, feat_dim), time_steps, field_sign, meta)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DenoiserModel":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def as_batch(x, dim: Optional[int] = None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"expected trailing dimension {dim}, got {x.shape[1]}")
    return x
