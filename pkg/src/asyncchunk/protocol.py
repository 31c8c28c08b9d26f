"""Length-prefixed binary wire protocol.

Frame layout (little-endian)::

    0   4  magic  b"LRWP"
    4   1  version (1)
    5   1  kind
    6   8  seq (u64 correlation id)
    14  4  body length (u32)
    18  .  body

Vectors in bodies are a u32 element count followed by f64 values; text is a
u32 byte count followed by UTF-8. See docs/wire.md for worked examples.
Sequence numbering per connection is the session layer's business; the
codec accepts any u64.
"""
from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

MAGIC = b"LRWP"
VERSION = 1
HEADER = struct.Struct("<4sBBQI")
HEADER_SIZE = HEADER.size  # 18
U32_MAX = 0xFFFFFFFF
U64_MAX = 0xFFFFFFFFFFFFFFFF
DEFAULT_MAX_BODY = 64 * 1024 * 1024


class Kind(enum.IntEnum):
    HELLO = 0
    OBSERVATION = 1
    CHUNK_REPLY = 2
    TRANSITION = 3
    PARAM_UPDATE = 4
    ERROR = 5


class Source(enum.IntEnum):
    AUTONOMOUS = 0
    HUMAN = 1
    OFFLINE = 2


class ErrorCode(enum.IntEnum):
    MALFORMED = 1
    TOO_MANY_SESSIONS = 2
    DIM_MISMATCH = 3
    BAD_STATE = 4
    UNSUPPORTED = 5
    INTERNAL = 6


class ProtocolError(Exception):
    pass


class BadMagic(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class Truncated(ProtocolError):
    def __init__(self, needed: int):
        self.needed = needed
        super().__init__(f"need {needed} more bytes")


class MalformedBody(ProtocolError):
    pass


class Oversize(ProtocolError):
    pass


# payloads

@dataclass(eq=False)
class Hello:
    info: str = ""


@dataclass(eq=False)
class Observation:
    values: np.ndarray


@dataclass(eq=False)
class ChunkReply:
    actions: np.ndarray  # (H_a, action_dim)


@dataclass(eq=False)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    source: Source = Source.AUTONOMOUS


@dataclass(eq=False)
class ParamUpdate:
    version: int
    params: np.ndarray
    checksum: Optional[int] = None

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.checksum is None:
            self.checksum = param_checksum(self.params)

    def consistent(self) -> bool:
        return self.checksum == param_checksum(self.params)


@dataclass(eq=False)
class Error:
    code: int
    text: str = ""


Payload = Union[Hello, Observation, ChunkReply, Transition, ParamUpdate, Error]
_KIND_OF = {Hello: Kind.HELLO, Observation: Kind.OBSERVATION, ChunkReply: Kind.CHUNK_REPLY,
            Transition: Kind.TRANSITION, ParamUpdate: Kind.PARAM_UPDATE, Error: Kind.ERROR}


def param_checksum(params: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(params, dtype="<f8").tobytes()) & U32_MAX


@dataclass(eq=False)
class WireMessage:
    seq: int
    payload: Payload

    @property
    def kind(self) -> Kind:
        return _KIND_OF[type(self.payload)]

    def __eq__(self, other):
        # bit-exact equality, NaN payloads included
        if not isinstance(other, WireMessage):
            return NotImplemented
        return encode(self) == encode(other)

    __hash__ = None


# body encoding

def _vec(x) -> bytes:
    arr = np.ascontiguousarray(np.ravel(np.asarray(x, dtype=float)), dtype="<f8")
    if arr.size > U32_MAX:
        raise Oversize("vector longer than u32")
    return struct.pack("<I", arr.size) + arr.tobytes()


def _text(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > U32_MAX:
        raise Oversize("text longer than u32")
    return struct.pack("<I", len(raw)) + raw


def _encode_body(p: Payload) -> bytes:
    if isinstance(p, Hello):
        return _text(p.info) if p.info else b""
    if isinstance(p, Observation):
        return _vec(p.values)
    if isinstance(p, ChunkReply):
        actions = np.atleast_2d(np.asarray(p.actions, dtype=float))
        return struct.pack("<I", actions.shape[0]) + _vec(actions)
    if isinstance(p, Transition):
        return _vec(p.s) + _vec(p.a) + struct.pack("<d", p.r) + _vec(p.s_next) + struct.pack("<B", int(p.source))
    if isinstance(p, ParamUpdate):
        return struct.pack("<QI", p.version, p.checksum) + _vec(p.params)
    if isinstance(p, Error):
        return struct.pack("<H", p.code) + _text(p.text)
    raise TypeError(f"unknown payload type {type(p).__name__}")


def encode(msg: WireMessage) -> bytes:
    if not 0 <= msg.seq <= U64_MAX:
        raise Oversize(f"seq {msg.seq} does not fit in u64")
    body = _encode_body(msg.payload)
    if len(body) > U32_MAX:
        raise Oversize("body longer than u32")
    return HEADER.pack(MAGIC, VERSION, int(msg.kind), msg.seq, len(body)) + body


class _Body:
    """Cursor over a body that never reads past its declared end."""

    def __init__(self, data: memoryview):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise MalformedBody(f"body too short: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def vec(self) -> np.ndarray:
        (n,) = self.unpack("<I")
        if n > (len(self.data) - self.pos) // 8:
            raise MalformedBody(f"vector of {n} elements overruns body")
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(float)

    def text(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedBody(f"invalid UTF-8: {e}") from None

    def done(self):
        if self.pos != len(self.data):
            raise MalformedBody(f"{len(self.data) - self.pos} trailing bytes in body")


def _decode_body(kind: Kind, body: memoryview) -> Payload:
    b = _Body(body)
    if kind == Kind.HELLO:
        p = Hello(b.text()) if len(body) else Hello()
    elif kind == Kind.OBSERVATION:
        p = Observation(b.vec())
    elif kind == Kind.CHUNK_REPLY:
        (rows,) = b.unpack("<I")
        flat = b.vec()
        if rows == 0 or flat.size % rows:
            raise MalformedBody(f"{flat.size} values cannot form {rows} rows")
        p = ChunkReply(flat.reshape(rows, flat.size // rows))
    elif kind == Kind.TRANSITION:
        s = b.vec()
        a = b.vec()
        (r,) = b.unpack("<d")
        s_next = b.vec()
        (src,) = b.unpack("<B")
        try:
            source = Source(src)
        except ValueError:
            raise MalformedBody(f"unknown transition source {src}") from None
        p = Transition(s, a, r, s_next, source)
    elif kind == Kind.PARAM_UPDATE:
        version, checksum = b.unpack("<QI")
        p = ParamUpdate(version, b.vec(), checksum)
    else:
        (code,) = b.unpack("<H")
        p = Error(code, b.text())
    b.done()
    return p


def decode(data: bytes, max_body: int = DEFAULT_MAX_BODY) -> Tuple[WireMessage, bytes]:
    """Parse exactly one frame from the front of ``data``.

    Returns ``(message, remainder)``. :class:`Truncated` carries how many
    more bytes are needed, so stream readers can resume.
    """
    view = memoryview(bytes(data))
    if len(view) >= 4 and view[:4] != MAGIC:
        raise BadMagic(f"bad magic {bytes(view[:4])!r}")
    if len(view) < 4 and bytes(view) != MAGIC[:len(view)]:
        raise BadMagic(f"bad magic prefix {bytes(view)!r}")
    if len(view) < HEADER_SIZE:
        raise Truncated(HEADER_SIZE - len(view))
    _, version, kind_byte, seq, body_len = HEADER.unpack(view[:HEADER_SIZE])
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    try:
        kind = Kind(kind_byte)
    except ValueError:
        raise MalformedBody(f"unknown kind byte {kind_byte}") from None
    if body_len > max_body:
        raise Oversize(f"declared body of {body_len} bytes exceeds limit {max_body}")
    end = HEADER_SIZE + body_len
    if len(view) < end:
        raise Truncated(end - len(view))
    payload = _decode_body(kind, view[HEADER_SIZE:end])
    return WireMessage(seq, payload), bytes(view[end:])


class FrameReader:
    """Incremental decoder for a byte stream carrying consecutive frames."""

    def __init__(self, max_body: int = DEFAULT_MAX_BODY):
        self.buffer = b""
        self.max_body = max_body

    def feed(self, data: bytes) -> List[WireMessage]:
        self.buffer += data
        out = []
        while self.buffer:
            try:
                msg, self.buffer = decode(self.buffer, self.max_body)
            except Truncated:
                break
            out.append(msg)
        return out
