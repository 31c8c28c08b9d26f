"""Random valid protocol messages shared by the protocol and acceptance tests."""
import numpy as np

from asyncchunk.protocol import (ChunkReply, Error, Hello, Observation, ParamUpdate, Source, Transition,
                                 WireMessage)


def _vec(rng, n=None):
    n = int(rng.integers(0, 9)) if n is None else n
    # raw bit patterns cover NaN payloads, infinities and subnormals
    return rng.integers(0, 2**63, size=n, dtype=np.uint64).view(np.float64) if rng.random() < 0.3 \
        else rng.normal(size=n) * 10.0 ** rng.integers(-5, 5)


def _text(rng):
    alphabet = "abc xyzé中\U0001f600{}:\""
    return "".join(rng.choice(list(alphabet), size=int(rng.integers(0, 20))))


def random_message(rng) -> WireMessage:
    kind = int(rng.integers(0, 6))
    if kind == 0:
        p = Hello(_text(rng))
    elif kind == 1:
        p = Observation(_vec(rng))
    elif kind == 2:
        p = ChunkReply(_vec(rng, int(rng.integers(1, 5)) * 3).reshape(-1, 3))
    elif kind == 3:
        n = int(rng.integers(0, 6))
        p = Transition(_vec(rng, n), _vec(rng), float(rng.normal()), _vec(rng, n), Source(int(rng.integers(0, 3))))
    elif kind == 4:
        p = ParamUpdate(int(rng.integers(0, 2**63)), _vec(rng))
    else:
        p = Error(int(rng.integers(0, 2**16)), _text(rng))
    return WireMessage(int(rng.integers(0, 2**63)) * 2 + int(rng.integers(0, 2)), p)
