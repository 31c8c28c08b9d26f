"""Robot client: the asynchronous chunk-execution loop against the simulated arm.

Tick ``k`` of :func:`control_loop`:

1. pop the action for tick ``k`` (zero-order hold of the last action when
   the queue is empty, which counts as a starvation tick);
2. move the arm towards it, rate-limited per tick;
3. capture the observation and, if the queue is below threshold and the
   observation is not a near-duplicate, send it (at most one request in
   flight); the resulting chunk starts at tick ``k + 1``;
4. at the end of the tick, merge whatever reply has arrived.

Sessions hide the transport: :class:`SimulatedSession` runs a policy in
process against a virtual clock, :class:`WebSocketSession` talks to a real
server. Both deliver replies through a single-slot mailbox.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import dataset as ds
from .chunking import (DEFAULT_ALPHA_AGG, DEFAULT_D_LIM, ActionChunk, ActionQueue, EmptyQueue, GapDetected,
                       needs_processing, write_trace)
from .kinematics import ArmState, fk, observation
from .policy import ACTION_KEY, OBS_KEY
from .protocol import ChunkReply, Error, ErrorCode, Hello, Observation, ProtocolError, WireMessage, decode, encode
from .server.config import LatencyModel

logger = logging.getLogger(__name__)

DEFAULT_MAX_STEP = 0.1
DEFAULT_TASK = "policy rollout"


class SessionLost(RuntimeError):
    pass


class SessionRefused(RuntimeError):
    def __init__(self, code: int, text: str):
        self.code = code
        super().__init__(f"server refused session (code {code}): {text}")


# clocks

class VirtualClock:
    """Simulated time: sleeping just advances the clock."""

    def __init__(self):
        self.t = 0.0

    def now(self) -> float:
        return self.t

    def sleep_until(self, t: float):
        self.t = max(self.t, t)


class RealClock:
    """Wall-clock time measured from construction."""

    def __init__(self):
        self.t0 = time.monotonic()

    def now(self) -> float:
        return time.monotonic() - self.t0

    def sleep_until(self, t: float):
        delay = t - self.now()
        if delay > 0:
            time.sleep(delay)


# sessions

class _Mailbox:
    """Single slot, newest reply wins."""

    def __init__(self):
        self.lock = threading.Lock()
        self.item: Optional[Tuple[int, np.ndarray]] = None
        self.cond = threading.Condition(self.lock)

    def put(self, seq: int, chunk: np.ndarray):
        with self.cond:
            if self.item is None or seq > self.item[0]:
                self.item = (seq, chunk)
            self.cond.notify_all()

    def take(self) -> Optional[Tuple[int, np.ndarray]]:
        with self.lock:
            item, self.item = self.item, None
            return item


class SimulatedSession:
    """In-process stand-in for the server, with injected latency on a shared clock.

    Replies become visible once ``clock.now()`` reaches request time plus the
    sampled latency. A new request supersedes one still pending, as on the
    real server.
    """

    def __init__(self, policy, latency: LatencyModel = LatencyModel(), clock=None, seed: int = 0):
        self.policy = policy
        self.latency = latency
        self.clock = clock or VirtualClock()
        self.seed = seed
        self.rng = np.random.default_rng([seed, 1])
        self.pending: Optional[Tuple[float, int, np.ndarray]] = None
        self.mailbox = _Mailbox()
        self.errors: List[Tuple[int, int, str]] = []

    def open(self) -> dict:
        return self.policy.describe()

    def _infer(self, seq, obs_stack):
        return self.policy.infer_chunk(obs_stack, rng=np.random.default_rng([self.seed, seq]))

    def infer_blocking(self, seq: int, obs_stack, timeout: float = 30.0) -> np.ndarray:
        return self._infer(seq, obs_stack)

    def request(self, seq: int, obs_stack):
        ready = self.clock.now() + self.latency.sample(self.rng)
        self.pending = (ready, seq, self._infer(seq, obs_stack))

    def poll(self) -> Optional[Tuple[int, np.ndarray]]:
        if self.pending is not None and self.pending[0] <= self.clock.now() + 1e-12:
            _, seq, chunk = self.pending
            self.pending = None
            self.mailbox.put(seq, chunk)
        return self.mailbox.take()

    def take_errors(self) -> List[Tuple[int, int, str]]:
        out, self.errors = self.errors, []
        return out

    def close(self):
        pass


class WebSocketSession:
    """Client side of the binary WebSocket protocol, with a background reader thread."""

    def __init__(self, address: str, timeout: float = 10.0):
        self.url = address if address.startswith("ws") else f"ws://{address}/ws"
        self.timeout = timeout
        self.ws = None
        self.mailbox = _Mailbox()
        self.errors: List[Tuple[int, int, str]] = []
        self.lost: Optional[str] = None
        self.reader: Optional[threading.Thread] = None
        self.info: dict = {}

    def open(self) -> dict:
        from websockets.sync.client import connect

        from websockets.exceptions import ConnectionClosed

        try:
            self.ws = connect(self.url, open_timeout=self.timeout, max_size=None)
            try:
                self.ws.send(encode(WireMessage(0, Hello("asyncchunk-client"))))
            except ConnectionClosed:
                pass  # a refusing server closes at once; its Error frame is still buffered
            msg, _ = decode(self.ws.recv(timeout=self.timeout))
        except (OSError, TimeoutError, ProtocolError) as e:
            raise SessionLost(f"handshake with {self.url} failed: {e}") from e
        except Exception as e:  # websockets' own exception hierarchy
            raise SessionLost(f"handshake with {self.url} failed: {e}") from e
        if isinstance(msg.payload, Error):
            self.ws.close()
            raise SessionRefused(msg.payload.code, msg.payload.text)
        if not isinstance(msg.payload, Hello):
            raise SessionLost(f"expected Hello, got {msg.kind.name}")
        self.info = json.loads(msg.payload.info) if msg.payload.info else {}
        self.reader = threading.Thread(target=self._read_loop, daemon=True)
        self.reader.start()
        return self.info

    def _read_loop(self):
        try:
            for data in self.ws:
                msg, _ = decode(data)
                p = msg.payload
                if isinstance(p, ChunkReply):
                    self.mailbox.put(msg.seq, p.actions)
                elif isinstance(p, Error):
                    with self.mailbox.cond:
                        self.errors.append((msg.seq, p.code, p.text))
                        self.mailbox.cond.notify_all()
        except Exception as e:
            self.lost = f"{type(e).__name__}: {e}"
        else:
            self.lost = "connection closed"
        with self.mailbox.cond:
            self.mailbox.cond.notify_all()

    def request(self, seq: int, obs_stack):
        try:
            self.ws.send(encode(WireMessage(seq, Observation(np.asarray(obs_stack, dtype=float)))))
        except Exception as e:
            raise SessionLost(f"send failed: {e}") from e

    def poll(self) -> Optional[Tuple[int, np.ndarray]]:
        item = self.mailbox.take()
        if item is None and self.lost is not None:
            raise SessionLost(self.lost)
        return item

    def take_errors(self) -> List[Tuple[int, int, str]]:
        with self.mailbox.lock:
            out, self.errors = self.errors, []
        return out

    def infer_blocking(self, seq: int, obs_stack, timeout: Optional[float] = None) -> np.ndarray:
        self.request(seq, obs_stack)
        deadline = time.monotonic() + (timeout or self.timeout)
        with self.mailbox.cond:
            while True:
                item = self.mailbox.item
                if item is not None and item[0] == seq:
                    self.mailbox.item = None
                    return item[1]
                for e in self.errors:
                    if e[0] == seq:
                        raise SessionRefused(e[1], e[2])
                if self.lost is not None:
                    raise SessionLost(self.lost)
                left = deadline - time.monotonic()
                if left <= 0:
                    raise SessionLost(f"no reply for seq {seq} within timeout")
                self.mailbox.cond.wait(left)

    def close(self):
        if self.ws is not None:
            self.ws.close()
        if self.reader is not None:
            self.reader.join(timeout=5)


# control loop

@dataclass
class ClientConfig:
    server: str = "127.0.0.1:8765"
    dt: float = 0.033
    g: float = 0.5
    h_a: int = 50
    h_o: int = 1
    d_lim: float = DEFAULT_D_LIM
    episode_len: int = 500
    record_root: Optional[str] = None
    mode: str = "ema"
    alpha_agg: float = DEFAULT_ALPHA_AGG
    max_step: float = DEFAULT_MAX_STEP
    task: str = DEFAULT_TASK

    def __post_init__(self):
        if not 0.0 <= self.g <= 1.0:
            raise ValueError(f"g must lie in [0, 1], got {self.g}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.h_a < 1 or self.h_o < 1 or self.episode_len < 0:
            raise ValueError("h_a and h_o must be >= 1 and episode_len >= 0")
        if self.d_lim < 0 or self.max_step <= 0:
            raise ValueError("d_lim must be >= 0 and max_step > 0")


@dataclass
class EpisodeReport:
    ticks: int = 0
    sends: int = 0
    triggers: int = 0
    filtered: int = 0
    merges: int = 0
    starvations: int = 0
    gaps: int = 0
    errors: int = 0
    session_lost: Optional[str] = None
    recorded: Optional[str] = None
    dt: float = 0.0
    trace: List[Tuple[int, float, bool, bool, bool]] = field(default_factory=list)
    observations: List[np.ndarray] = field(default_factory=list)
    actions: List[np.ndarray] = field(default_factory=list)
    ee: List[np.ndarray] = field(default_factory=list)

    @property
    def idle_ticks(self) -> int:
        return self.starvations

    @property
    def idle_runs(self) -> List[int]:
        """Lengths of maximal runs of consecutive starved ticks."""
        runs, cur = [], 0
        for _, _, _, _, starved in self.trace:
            if starved:
                cur += 1
            elif cur:
                runs.append(cur)
                cur = 0
        if cur:
            runs.append(cur)
        return runs

    @property
    def mean_idle_s(self) -> float:
        runs = self.idle_runs
        return float(np.mean(runs)) * self.dt if runs else 0.0

    def fill_range(self, skip: int = 0) -> Tuple[float, float]:
        fills = [f for t, f, *_ in self.trace if t >= skip]
        return (min(fills), max(fills)) if fills else (0.0, 0.0)

    def summary(self) -> Dict[str, object]:
        return {"ticks": self.ticks, "sends": self.sends, "triggers": self.triggers, "filtered": self.filtered,
                "merges": self.merges, "starvations": self.starvations, "idle_ticks": self.idle_ticks,
                "idle_runs": len(self.idle_runs), "mean_idle_s": self.mean_idle_s, "gaps": self.gaps,
                "errors": self.errors, "session_lost": self.session_lost, "recorded": self.recorded}

    def trace_csv(self) -> str:
        return write_trace(self.trace)


def apply_action(state: ArmState, target, max_step: float = DEFAULT_MAX_STEP) -> ArmState:
    """Move towards an absolute joint target by at most ``max_step`` rad per joint."""
    step = np.clip(np.asarray(target, dtype=float) - state.theta, -max_step, max_step)
    return state.with_theta(state.theta + step)


def _stack(history: List[np.ndarray], h_o: int) -> np.ndarray:
    hist = history[-h_o:]
    return np.concatenate([hist[0]] * (h_o - len(hist)) + hist)


def control_loop(config: ClientConfig, env: ArmState, session, clock=None) -> EpisodeReport:
    """Run one episode; the session must already be open."""
    clock = clock or getattr(session, "clock", None) or RealClock()
    report = EpisodeReport(dt=config.dt)
    q = ActionQueue(config.h_a, config.g, config.mode, config.alpha_agg)
    state = env
    history = [observation(state)]
    n_joint = state.theta.size
    seq = 1
    try:
        first = session.infer_blocking(seq, _stack(history, config.h_o))
    except SessionLost as e:
        report.session_lost = str(e)
        return report
    q.merge_chunk(ActionChunk(0, first))
    last_sent = history[-1][:n_joint]
    last_action = np.asarray(first[0], dtype=float)
    start_of: Dict[int, int] = {}
    in_flight: Optional[int] = None
    t0 = clock.now()
    for k in range(config.episode_len):
        clock.sleep_until(t0 + k * config.dt)
        obs_before = history[-1]
        try:
            action = q.pop_front()
            starved = False
            last_action = action
        except EmptyQueue:
            action = last_action
            starved = True
            report.starvations += 1
        state = apply_action(state, action, config.max_step)
        obs = observation(state)
        history.append(obs)
        del history[:-config.h_o]
        report.observations.append(obs_before)
        report.actions.append(np.asarray(action, dtype=float))
        report.ee.append(fk(state))

        sent = False
        joints = obs[:n_joint]
        try:
            if needs_processing(q, joints, last_sent, config.d_lim):
                report.triggers += 1
                if in_flight is None:
                    seq += 1
                    session.request(seq, _stack(history, config.h_o))
                    start_of[seq] = k + 1
                    in_flight = seq
                    last_sent = joints
                    report.sends += 1
                    sent = True
            elif q.fill < config.g:
                report.filtered += 1

            clock.sleep_until(t0 + (k + 1) * config.dt)
            merged = False
            reply = session.poll()
            for err_seq, code, text in session.take_errors():
                report.errors += 1
                logger.warning("server error %d for seq %d: %s", code, err_seq, text)
                if err_seq == in_flight:
                    in_flight = None
        except SessionLost as e:
            report.session_lost = str(e)
            report.trace.append((k, q.fill, sent, False, starved))
            report.ticks = k + 1
            break
        if reply is not None:
            rseq, chunk = reply
            if rseq in start_of:
                try:
                    q.merge_chunk(ActionChunk(start_of[rseq], chunk))
                    merged = True
                    report.merges += 1
                except GapDetected:
                    report.gaps += 1
                if rseq >= (in_flight or 0):
                    in_flight = None
                for s in [s for s in start_of if s <= rseq]:
                    del start_of[s]
        report.trace.append((k, q.fill, sent, merged, starved))
        report.ticks = k + 1
    return report


def record_episode(config: ClientConfig, report: EpisodeReport) -> Optional[ds.EpisodeMeta]:
    """Append the run as one episode of (observation before the tick, applied action).

    Without ``record_root`` nothing is written and the report notes the skip.
    """
    if not config.record_root:
        report.recorded = "skipped"
        return None
    root = config.record_root
    try:
        ds.load_info(root)
    except ds.IoFailure:
        obs_dim = report.observations[0].size if report.observations else 4
        act_dim = report.actions[0].size if report.actions else 2
        ds.create_dataset(root, 1.0 / config.dt, {OBS_KEY: ("float64", (obs_dim,)),
                                                  ACTION_KEY: ("float64", (act_dim,))})
    frames = [ds.EpisodeFrame({OBS_KEY: o, ACTION_KEY: a}) for o, a in zip(report.observations, report.actions)]
    meta = ds.write_episode(root, frames, config.task)
    report.recorded = f"episode {meta.episode_index}"
    return meta


def error_name(code: int) -> str:
    try:
        return ErrorCode(code).name
    except ValueError:
        return str(code)
