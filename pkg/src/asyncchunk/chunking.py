"""Client-side action queue: consumption, overlap aggregation, similarity filter.

Actions are keyed by absolute control tick. A chunk predicted from the
observation captured at tick ``k`` starts at tick ``k + 1``; whatever part of
it refers to ticks already consumed when it arrives is dropped.
"""
from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Iterable, List, Optional, Tuple

import numpy as np

DEFAULT_ALPHA_AGG = 0.5
DEFAULT_D_LIM = 0.01
TRACE_COLUMNS = ("tick", "fill_fraction", "sent_flag", "merged_flag", "starved_flag")


class EmptyQueue(Exception):
    """Raised by pop_front on an empty queue: one starvation tick."""


class GapDetected(Exception):
    pass


class DegenerateHorizon(ValueError):
    def __init__(self, g_min: float):
        self.g_min = g_min
        super().__init__(f"required threshold g_min={g_min:.4f} exceeds 1: inference outlasts a whole chunk")


@dataclass(eq=False)
class ActionChunk:
    start_step: int
    actions: np.ndarray

    def __post_init__(self):
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        if self.actions.shape[0] < 1:
            raise ValueError("chunk must hold at least one action")
        if not np.all(np.isfinite(self.actions)):
            raise ValueError("chunk contains non-finite actions")

    def __len__(self):
        return self.actions.shape[0]


@dataclass(eq=False)
class ActionQueue:
    h_a: int
    g: float = 0.5
    mode: str = "ema"
    alpha_agg: float = DEFAULT_ALPHA_AGG
    next_tick: int = 0
    pending: Deque[Tuple[int, np.ndarray]] = field(default_factory=deque)
    starvations: int = 0

    def __post_init__(self):
        if self.h_a < 1:
            raise ValueError("h_a must be >= 1")
        if not 0.0 <= self.g <= 1.0:
            raise ValueError(f"g must lie in [0, 1], got {self.g}")
        if self.mode not in ("ema", "replace"):
            raise ValueError(f"unknown aggregation mode {self.mode!r}")
        if not 0.0 <= self.alpha_agg <= 1.0:
            raise ValueError("alpha_agg must lie in [0, 1]")

    def __len__(self):
        return len(self.pending)

    @property
    def fill(self) -> float:
        return len(self.pending) / self.h_a

    def ticks(self) -> List[int]:
        return [t for t, _ in self.pending]

    def pop_front(self) -> np.ndarray:
        """Consume the action for ``next_tick``.

        On an empty queue the tick still elapses: ``next_tick`` advances, the
        starvation counter is bumped and :class:`EmptyQueue` is raised.
        """
        tick = self.next_tick
        self.next_tick += 1
        if not self.pending:
            self.starvations += 1
            raise EmptyQueue(f"no action for tick {tick}")
        t, action = self.pending.popleft()
        return action

    def merge_chunk(self, incoming: ActionChunk) -> "ActionQueue":
        """Aggregate ``incoming`` into the queue, aligned by absolute tick."""
        last = self.pending[-1][0] if self.pending else self.next_tick - 1
        if incoming.start_step > last + 1:
            raise GapDetected(f"chunk starts at tick {incoming.start_step}, queue ends at {last}")
        old = {t: a for t, a in self.pending}
        merged = deque((t, a) for t, a in self.pending)
        merged_ticks = {t: i for i, (t, _) in enumerate(merged)}
        for i, a_new in enumerate(incoming.actions):
            tick = incoming.start_step + i
            if tick < self.next_tick:
                continue  # already executed
            if tick in old:
                a_old = old[tick]
                if self.mode == "ema":
                    a = (1.0 - self.alpha_agg) * a_old + self.alpha_agg * a_new
                else:
                    a = a_new.copy()
                merged[merged_ticks[tick]] = (tick, a)
            else:
                merged.append((tick, a_new.copy()))
        self.pending = merged
        return self

    def needs_processing(self, obs, last_sent: Optional[np.ndarray], d_lim: float = DEFAULT_D_LIM) -> bool:
        return needs_processing(self, obs, last_sent, d_lim)


def pop_front(q: ActionQueue) -> np.ndarray:
    return q.pop_front()


def merge_chunk(q: ActionQueue, incoming: ActionChunk) -> ActionQueue:
    return q.merge_chunk(incoming)


def needs_processing(q: ActionQueue, obs, last_sent: Optional[np.ndarray], d_lim: float = DEFAULT_D_LIM) -> bool:
    """Threshold test plus joint-space near-duplicate filter.

    An empty queue always triggers processing, whatever the threshold and
    similarity say.
    """
    if not q.pending:
        return True
    if not q.fill < q.g:
        return False
    if last_sent is None:
        return True
    return float(np.linalg.norm(np.asarray(obs, dtype=float) - np.asarray(last_sent, dtype=float))) >= d_lim


def queue_analytics(e_ls: float, dt: float, h_a: int) -> Tuple[float, float]:
    """Smallest starvation-free threshold and the sequential (g=0) idle time per chunk.

    Raises :class:`DegenerateHorizon` when even g=1 cannot hide the latency.
    """
    if not (e_ls > 0 and dt > 0 and h_a > 0):
        raise ValueError("e_ls, dt and h_a must be positive")
    g_min = (e_ls / dt) / h_a
    if g_min > 1.0:
        raise DegenerateHorizon(g_min)
    return g_min, e_ls


def sawtooth_width(e_ls: float, dt: float) -> int:
    return math.ceil(e_ls / dt - 1e-9)


def write_trace(rows: Iterable[Tuple[int, float, bool, bool, bool]], fh=None) -> str:
    """Serialise queue trace rows as CSV with a header; returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for tick, fill, sent, merged, starved in rows:
        w.writerow((int(tick), f"{fill:.6f}", int(sent), int(merged), int(starved)))
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def read_trace(text: str) -> List[Tuple[int, float, bool, bool, bool]]:
    r = csv.reader(io.StringIO(text))
    header = next(r)
    if tuple(header) != TRACE_COLUMNS:
        raise ValueError(f"unexpected trace header {header}")
    return [(int(t), float(f), s == "1", m == "1", st == "1") for t, f, s, m, st in r]
