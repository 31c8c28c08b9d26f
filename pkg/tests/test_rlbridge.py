import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from asyncchunk.protocol import Source, Transition
from asyncchunk.rlbridge import EmptyBuffer, ReplayBuffer, actor_learner_loop, route_push, sample_equal_mix


def _t(i, source=Source.AUTONOMOUS):
    return Transition(np.array([float(i)]), np.array([0.0]), 0.0, np.array([float(i)]), source)


def _ids(items):
    return [int(t.s[0]) for t in items]


def test_fifo_eviction():
    b = ReplayBuffer(3)
    for i in range(5):
        b.push(_t(i))
    assert len(b) == 3 and _ids(b.contents()) == [2, 3, 4]


def test_push_validation():
    b = ReplayBuffer(2)
    with pytest.raises(ValueError):
        b.push(Transition(np.zeros(1), np.zeros(1), float("nan"), np.zeros(1)))
    with pytest.raises(ValueError):
        b.push(Transition(np.zeros(1), np.zeros(1), 0.0, np.zeros(2)))
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_routing_examples():
    on, off = ReplayBuffer(1000), ReplayBuffer(1000)
    route_push(on, off, _t(1, Source.HUMAN))
    assert _ids(on.contents()) == [1] and _ids(off.contents()) == [1]
    route_push(on, off, _t(2, Source.AUTONOMOUS))
    assert _ids(on.contents()) == [1, 2] and _ids(off.contents()) == [1]
    route_push(on, off, _t(3, Source.OFFLINE))
    assert _ids(on.contents()) == [1, 2] and _ids(off.contents()) == [1, 3]
    on, off = ReplayBuffer(1000), ReplayBuffer(1000)
    for i in range(100):
        route_push(on, off, _t(i, Source.HUMAN))
        route_push(on, off, _t(i, Source.AUTONOMOUS))
    assert (len(on), len(off)) == (200, 100)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(list(Source)), max_size=200))
def test_routing_accounting(sources):
    on, off = ReplayBuffer(10_000), ReplayBuffer(10_000)
    for i, s in enumerate(sources):
        route_push(on, off, _t(i, s))
    n = {s: sources.count(s) for s in Source}
    assert len(on) == n[Source.HUMAN] + n[Source.AUTONOMOUS]
    assert len(off) == n[Source.HUMAN] + n[Source.OFFLINE]


def test_equal_mix_exact(rng):
    on, off = ReplayBuffer(10), ReplayBuffer(10)
    for i in range(10):
        on.push(_t(i))
        off.push(_t(100 + i, Source.OFFLINE))
    batch = sample_equal_mix(on, off, 8, rng)
    assert all(i < 100 for i in _ids(batch[:4])) and all(i >= 100 for i in _ids(batch[4:]))
    with pytest.raises(ValueError):
        sample_equal_mix(on, off, 7, rng)
    with pytest.raises(EmptyBuffer):
        sample_equal_mix(on, ReplayBuffer(4), 8, rng)
    with pytest.raises(EmptyBuffer):
        ReplayBuffer(4).sample(1)


def test_uniform_sampling_chi_square():
    rng = np.random.default_rng(7)
    on, off = ReplayBuffer(20), ReplayBuffer(13)
    for i in range(45):  # wraps, so the ring head is not at slot 0
        on.push(_t(i))
    for i in range(13):
        off.push(_t(1000 + i, Source.OFFLINE))
    ids = _ids(sample_equal_mix(on, off, 200_000, rng))
    on_counts = np.bincount(np.array(ids[:100_000]) - 25, minlength=20)
    off_counts = np.bincount(np.array(ids[100_000:]) - 1000, minlength=13)
    assert on_counts.size == 20 and off_counts.size == 13
    assert chisquare(on_counts).pvalue > 0.01 and chisquare(off_counts).pvalue > 0.01


def test_concurrent_push_and_sample():
    b = ReplayBuffer(64)
    stop = threading.Event()
    bad = []

    def sampler():
        r = np.random.default_rng(0)
        while not stop.is_set():
            if len(b):
                for t in b.sample(16, r):
                    if t.s[0] != t.s_next[0]:
                        bad.append(t)

    th = threading.Thread(target=sampler)
    th.start()
    for i in range(20_000):
        b.push(_t(i))
    stop.set()
    th.join()
    assert not bad and len(b) == 64


def test_actor_learner_counts():
    rep = actor_learner_loop(1000, update_every=100, seed=1)
    assert rep.lost is None
    assert rep.transitions_sent == rep.transitions_received == 1000 and rep.in_order
    assert rep.updates_sent == 10 and rep.versions_received == list(range(1, 11))
    assert rep.torn == 0 and rep.versions_applied and rep.versions_applied[-1] == 10
    assert rep.versions_applied == sorted(rep.versions_applied)
    # the learner may already be gone when the final broadcast is applied, so that ack can go unread
    assert rep.acks == rep.versions_applied[:len(rep.acks)] and len(rep.acks) >= len(rep.versions_applied) - 1
    assert rep.online_size + rep.offline_size > 1000 and rep.offline_size > 0


def test_actor_learner_session_lost():
    rep = actor_learner_loop(1000, update_every=100, fail_after=250)
    assert rep.lost is not None and rep.steps == 250 and rep.transitions_received == 250
