import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from flucdht.churn import ChurnTrace, TraceEvent
from flucdht.harness import Harness
from flucdht.simcore import Network, NetworkModel, SchedulingError, Simulator, apply_trace


class Sink:
    def __init__(self):
        self.alive = True
        self.got = []

    def receive(self, msg):
        self.got.append(msg)


def test_equal_times_run_in_scheduling_order():
    sim = Simulator()
    seen = []
    for i in range(5):
        sim.schedule(1.0, seen.append, i)
    sim.run_until(2.0)
    assert seen == [0, 1, 2, 3, 4]


@given(st.lists(st.floats(0, 100), max_size=50))
def test_dispatch_order_and_clock_monotone(times):
    sim = Simulator()
    seen = []
    for i, t in enumerate(times):
        sim.schedule(t, lambda t=t, i=i: seen.append((sim.now, t, i)))
    stats = sim.run_until(100.0)
    assert stats.dispatched == len(times)
    assert [s[0] for s in seen] == sorted(s[0] for s in seen)
    assert all(now == t for now, t, _ in seen)
    assert seen == sorted(seen)  # (time, sequence) order


def test_empty_queue_advances_to_end():
    sim = Simulator()
    stats = sim.run_until(42.0)
    assert (sim.now, stats.dispatched, stats.pending) == (42.0, 0, 0)


def test_scheduling_into_past_fails():
    sim = Simulator()
    sim.run_until(5.0)
    with pytest.raises(SchedulingError):
        sim.schedule(4.0, print)


def test_events_after_end_stay_queued():
    sim = Simulator()
    sim.schedule(10.0, print)
    stats = sim.run_until(5.0)
    assert stats.pending == 1 and sim.peek_time() == 10.0


def _net(q=0.0, seed=0, **kw):
    sim = Simulator()
    net = Network(sim, NetworkModel(q_f_link=q, **kw), random.Random(seed))
    return sim, net


def test_lossless_delivery_exactly_once():
    sim, net = _net()
    sink = Sink()
    net.register(1, sink)
    for i in range(1000):
        assert net.send(0, 1, i)
    sim.run_until(1.0)
    assert sorted(sink.got) == list(range(1000))
    assert net.delivered == net.sent == 1000


def test_loss_rate_monte_carlo():
    sim, net = _net(q=0.3, seed=4)
    sink = Sink()
    net.register(1, sink)
    n = 100_000
    for i in range(n):
        net.send(0, 1, i)
    sim.run_until(1.0)
    frac = len(sink.got) / n
    assert abs(frac - 0.7) <= 3 * math.sqrt(0.7 * 0.3 / n)
    assert net.delivered + net.lost == n  # conservation


def test_latency_within_bounds():
    sim, net = _net(latency_lo=0.02, latency_hi=0.05)
    arrivals = []
    node = Sink()
    node.receive = lambda msg: arrivals.append(sim.now)
    net.register(1, node)
    for _ in range(200):
        net.send(0, 1, None)
    sim.run_until(1.0)
    assert min(arrivals) >= 0.02 and max(arrivals) <= 0.05


def test_message_to_crashed_peer_is_dropped_silently():
    sim, net = _net()
    sink = Sink()
    net.register(1, sink)
    drops = []
    net.on_drop = drops.append
    assert net.send(0, 1, "hello")
    sink.alive = False
    sim.run_until(1.0)
    assert sink.got == [] and drops == ["hello"] and net.dropped_dead == 1


def test_partition_window():
    sim, net = _net(partition_schedule=((1.0, 2.0, frozenset({1})),))
    sink = Sink()
    net.register(1, sink)
    net.send(0, 1, "before")
    sim.run_until(1.5)
    assert not net.send(0, 1, "during")
    sim.run_until(2.5)
    net.send(0, 1, "after")
    sim.run_until(3.0)
    assert sink.got == ["before", "after"]


@pytest.mark.parametrize("kw", [{"q_f_link": 1.0}, {"q_f_link": -0.1}, {"latency_lo": 0.0}, {"latency_lo": 0.2}])
def test_network_model_validation(kw):
    with pytest.raises(ValueError):
        NetworkModel(**kw)


class Recorder:
    def __init__(self):
        self.calls = []

    def join(self, pid):
        self.calls.append(("join", pid))

    def leave(self, pid, graceful):
        self.calls.append(("leave" if graceful else "crash", pid))


def test_apply_trace_maps_actions():
    sim = Simulator()
    trace = ChurnTrace([TraceEvent(1.0, 7, "join"), TraceEvent(2.0, 8, "join"), TraceEvent(3.0, 7, "leave"),
                        TraceEvent(4.0, 8, "crash")])
    rec = Recorder()
    apply_trace(sim, trace, rec)
    sim.run_until(10.0)
    assert rec.calls == [("join", 7), ("join", 8), ("leave", 7), ("crash", 8)]


def test_empty_trace_keeps_bootstrap_population():
    h = Harness(seed=1)
    h.grow(10)
    apply_trace(h.sim, ChurnTrace(), h.overlay)
    h.run_for(100)
    assert h.overlay.live_population() == 10


def test_join_then_leave_restores_population():
    h = Harness(seed=2)  # strict: invariants checked at every split/coalesce
    h.grow(20)
    t = h.sim.now
    apply_trace(h.sim, ChurnTrace([TraceEvent(t + 1, 999, "join"), TraceEvent(t + 30, 999, "leave")]), h.overlay)
    h.run_for(10)
    assert h.overlay.live_population() == 21
    h.run_for(60)
    assert h.overlay.live_population() == 20
    h.overlay.strict = True
    h.overlay.check_invariants(after="test")
