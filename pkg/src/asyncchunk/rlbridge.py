"""Replay buffers, intervention routing and a decoupled actor/learner loop.

The learner here is a stub: its "parameters" are the running mean of the
action vectors it has received. What is exercised is the plumbing: a lossless
ordered transition stream, periodic versioned parameter broadcasts carrying a
CRC of their content, and an actor that swaps parameters only between
episodes and only after checking the CRC.
"""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .kinematics import ArmState, fk
from .protocol import (FrameReader, Hello, ParamUpdate, Source, Transition, WireMessage, encode,
                       param_checksum)

__all__ = ["Transition", "Source", "ReplayBuffer", "EmptyBuffer", "route_push", "sample_equal_mix",
           "BridgeReport", "actor_learner_loop", "SessionLost"]


class EmptyBuffer(RuntimeError):
    pass


class SessionLost(RuntimeError):
    pass


def _check(t: Transition):
    if not np.isfinite(t.r):
        raise ValueError("transition reward must be finite")
    if np.shape(t.s) != np.shape(t.s_next):
        raise ValueError("s and s_next must have the same shape")


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling.

    Pushes and samples take a lock, so a transition is never observed half
    written when producers and the sampler live on different threads.
    """

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: List[Optional[Transition]] = [None] * capacity
        self._head = 0  # index of the oldest item
        self._size = 0
        self._lock = threading.Lock()
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self._size

    def push(self, t: Transition):
        _check(t)
        with self._lock:
            if self._size < self.capacity:
                self._items[(self._head + self._size) % self.capacity] = t
                self._size += 1
            else:
                self._items[self._head] = t
                self._head = (self._head + 1) % self.capacity

    def contents(self) -> List[Transition]:
        """Oldest first."""
        with self._lock:
            return [self._items[(self._head + i) % self.capacity] for i in range(self._size)]

    def sample(self, n: int, rng: Optional[np.random.Generator] = None) -> List[Transition]:
        """``n`` uniform draws with replacement."""
        rng = rng or self.rng
        with self._lock:
            if self._size == 0:
                raise EmptyBuffer("cannot sample from an empty buffer")
            idx = rng.integers(0, self._size, size=n)
            return [self._items[(self._head + int(i)) % self.capacity] for i in idx]


def route_push(online: ReplayBuffer, offline: ReplayBuffer, t: Transition):
    """Human corrections go to both buffers, autonomous steps online only, offline data offline only."""
    src = Source(t.source)
    if src == Source.HUMAN:
        online.push(t)
        offline.push(t)
    elif src == Source.AUTONOMOUS:
        online.push(t)
    else:
        offline.push(t)


def sample_equal_mix(online: ReplayBuffer, offline: ReplayBuffer, batch: int,
                     rng: np.random.Generator) -> List[Transition]:
    """Exactly ``batch // 2`` draws from each buffer: online half first, then offline."""
    if batch < 2 or batch % 2:
        raise ValueError(f"batch must be a positive even number, got {batch}")
    if len(online) == 0 or len(offline) == 0:
        raise EmptyBuffer("both buffers must be non-empty")
    half = batch // 2
    return online.sample(half, rng) + offline.sample(half, rng)


# actor / learner

@dataclass
class BridgeReport:
    steps: int = 0
    transitions_sent: int = 0
    transitions_received: int = 0
    updates_sent: int = 0
    versions_received: List[int] = field(default_factory=list)
    versions_applied: List[int] = field(default_factory=list)
    acks: List[int] = field(default_factory=list)
    torn: int = 0
    in_order: bool = True
    online_size: int = 0
    offline_size: int = 0
    final_params: Optional[List[float]] = None
    lost: Optional[str] = None

    def summary(self) -> dict:
        d = dict(self.__dict__)
        d["versions_received"] = len(self.versions_received)
        d["versions_applied"] = list(self.versions_applied)
        d["acks"] = len(self.acks)
        return d


_CLOSE = None


class _Channel:
    """One direction of a byte stream; ``None`` marks end of stream."""

    def __init__(self):
        self.q: "queue.Queue[Optional[bytes]]" = queue.Queue()

    def send(self, data: Optional[bytes]):
        self.q.put(data)

    def recv(self, timeout: Optional[float] = None) -> Optional[bytes]:
        return self.q.get(timeout=timeout)

    def try_recv(self) -> Optional[bytes]:
        try:
            return self.q.get_nowait()
        except queue.Empty:
            return b""


def _learner(inbox: _Channel, outbox: _Channel, update_every: int, report: BridgeReport,
             online: ReplayBuffer, offline: ReplayBuffer, timeout: float):
    reader = FrameReader()
    mean = None
    n = 0
    version = 0
    expected_seq = 1
    while True:
        try:
            data = inbox.recv(timeout)
        except queue.Empty:
            report.lost = "learner: actor went silent"
            break
        if data is _CLOSE:
            break
        for msg in reader.feed(data):
            p = msg.payload
            if isinstance(p, Hello):
                report.acks.append(int(p.info.split(":", 1)[1]))
                continue
            if not isinstance(p, Transition):
                continue
            if msg.seq != expected_seq:
                report.in_order = False
            expected_seq = msg.seq + 1
            report.transitions_received += 1
            route_push(online, offline, p)
            a = np.asarray(p.a, dtype=float)
            n += 1
            mean = a.copy() if mean is None else mean + (a - mean) / n
            if n % update_every == 0:
                version += 1
                outbox.send(encode(WireMessage(version, ParamUpdate(version, mean.copy()))))
                report.updates_sent += 1
    outbox.send(_CLOSE)


def _split_frames(data: bytes, rng: np.random.Generator) -> List[bytes]:
    # deliver a frame in random pieces to exercise stream reassembly
    cuts = sorted(set(rng.integers(1, len(data), size=2).tolist())) if len(data) > 2 else []
    parts, prev = [], 0
    for c in cuts + [len(data)]:
        parts.append(data[prev:c])
        prev = c
    return parts


def actor_learner_loop(steps: int, update_every: int = 100, episode_len: int = 50, human_rate: float = 0.2,
                       seed: int = 0, capacity: int = 100_000, timeout: float = 10.0,
                       fail_after: Optional[int] = None) -> BridgeReport:
    """Stream ``steps`` transitions from an actor thread to a learner thread.

    Both directions carry encoded protocol frames, delivered in random
    fragments. The actor rolls a random joint-space walk of the planar arm,
    labelling a ``human_rate`` fraction of steps as human interventions. It
    drains parameter updates at episode boundaries, verifies each CRC, swaps
    in the newest consistent vector and acknowledges the version. With
    ``fail_after`` the actor stops abruptly after that many steps, which the
    report records as a lost session.
    """
    if steps < 0 or update_every < 1 or episode_len < 1:
        raise ValueError("steps >= 0, update_every >= 1 and episode_len >= 1 required")
    rng = np.random.default_rng(seed)
    report = BridgeReport()
    online, offline = ReplayBuffer(capacity, seed), ReplayBuffer(capacity, seed + 1)
    to_learner, to_actor = _Channel(), _Channel()
    learner = threading.Thread(target=_learner, args=(to_learner, to_actor, update_every, report, online,
                                                      offline, timeout), daemon=True)
    learner.start()
    reader = FrameReader()
    params = None
    state = ArmState([np.pi / 2, 0.5])
    seq = 0
    ack_seq = 0
    learner_closed = False

    def drain_updates():
        nonlocal params, learner_closed
        newest = None
        while True:
            data = to_actor.try_recv()
            if data is _CLOSE:
                learner_closed = True
                break
            if data == b"":
                break
            for msg in reader.feed(data):
                if isinstance(msg.payload, ParamUpdate):
                    upd = msg.payload
                    report.versions_received.append(upd.version)
                    if not upd.consistent():
                        report.torn += 1
                        continue
                    newest = upd
        return newest

    def apply(upd: ParamUpdate):
        nonlocal params, ack_seq
        candidate = np.array(upd.params, copy=True)
        if param_checksum(candidate) != upd.checksum:
            report.torn += 1
            return
        params = candidate  # single reference swap
        report.versions_applied.append(upd.version)
        ack_seq += 1
        to_learner.send(encode(WireMessage(ack_seq, Hello(f"ack:{upd.version}"))))

    for step in range(steps):
        if fail_after is not None and step >= fail_after:
            report.lost = f"actor: connection dropped after {step} steps"
            break
        if step % episode_len == 0 and step > 0:
            upd = drain_updates()
            if upd is not None:
                apply(upd)
        source = Source.HUMAN if rng.random() < human_rate else Source.AUTONOMOUS
        action = state.theta + rng.normal(0.0, 0.05, 2)
        nxt = state.with_theta(action)
        s, s_next = np.concatenate([state.theta, fk(state)]), np.concatenate([nxt.theta, fk(nxt)])
        reward = -float(np.linalg.norm(fk(nxt) - np.array([0.9, 0.9])))
        seq += 1
        for part in _split_frames(encode(WireMessage(seq, Transition(s, action, reward, s_next, source))), rng):
            to_learner.send(part)
        report.transitions_sent += 1
        report.steps = step + 1
        state = nxt
    to_learner.send(_CLOSE)
    learner.join(timeout)
    if learner.is_alive():
        report.lost = report.lost or "learner did not finish"
    while not learner_closed:
        upd = drain_updates()
        if upd is not None:
            apply(upd)
        if learner_closed or learner.is_alive() is False and to_actor.q.empty():
            break
    report.online_size, report.offline_size = len(online), len(offline)
    report.final_params = None if params is None else params.tolist()
    return report
