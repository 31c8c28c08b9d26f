"""Server configuration and the injected-latency model."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class LatencyModel:
    """Extra service delay added before inference: ``none``, ``fixed`` or ``lognormal``."""

    kind: str = "none"
    params: Tuple[float, ...] = ()

    def __post_init__(self):
        expected = {"none": 0, "fixed": 1, "lognormal": 2}
        if self.kind not in expected:
            raise ValueError(f"unknown latency kind {self.kind!r}")
        if len(self.params) != expected[self.kind]:
            raise ValueError(f"{self.kind} latency takes {expected[self.kind]} parameter(s)")
        if not all(math.isfinite(p) for p in self.params):
            raise ValueError("latency parameters must be finite")
        if self.kind == "fixed" and self.params[0] < 0:
            raise ValueError("fixed latency must be >= 0")
        if self.kind == "lognormal" and self.params[1] < 0:
            raise ValueError("lognormal sigma must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "LatencyModel":
        """``none`` | ``fixed:S`` | ``lognormal:MU,SIGMA`` (seconds, log-space parameters)."""
        text = text.strip()
        if text == "none":
            return cls()
        kind, _, rest = text.partition(":")
        try:
            params = tuple(float(x) for x in rest.split(",")) if rest else ()
        except ValueError:
            raise ValueError(f"bad latency spec {text!r}") from None
        return cls(kind, params)

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "none":
            return 0.0
        if self.kind == "fixed":
            return self.params[0]
        return float(rng.lognormal(self.params[0], self.params[1]))

    @property
    def mean(self) -> float:
        if self.kind == "none":
            return 0.0
        if self.kind == "fixed":
            return self.params[0]
        mu, sigma = self.params
        return math.exp(mu + sigma ** 2 / 2)

    def __str__(self):
        if self.kind == "none":
            return "none"
        return f"{self.kind}:{','.join(repr(p) for p in self.params)}"


def parse_listen(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    try:
        p = int(port)
    except ValueError:
        raise ValueError(f"bad port in {text!r}") from None
    if not 0 <= p <= 65535:
        raise ValueError(f"port {p} out of range")
    return host, p


@dataclass
class ServerConfig:
    ckpt: Optional[str] = None
    host: str = "127.0.0.1"
    port: int = 8765
    steps: Optional[int] = None
    latency: LatencyModel = field(default_factory=LatencyModel)
    max_sessions: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.max_sessions < 1:
            raise ValueError("max_sessions must be >= 1")
