"""Deterministic discrete-event engine and lossy message transport."""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass
from typing import Any, Callable, Dict, FrozenSet, NamedTuple, Optional, Protocol, Tuple

from .churn import ChurnTrace

__all__ = [
    "SchedulingError",
    "Event",
    "RunStats",
    "Simulator",
    "NetworkModel",
    "Network",
    "TraceTarget",
    "apply_trace",
]


class SchedulingError(RuntimeError):
    pass


class Event(NamedTuple):
    time: float
    sequence: int
    handler: Callable[..., Any]
    args: Tuple[Any, ...]


@dataclass
class RunStats:
    dispatched: int
    end_time: float
    pending: int


class Simulator:
    """Virtual clock plus an event queue ordered by ``(time, sequence)``."""

    def __init__(self):
        self.now = 0.0
        self._queue = []
        self._seq = itertools.count()
        self.dispatched = 0

    def schedule(self, time: float, handler: Callable[..., Any], *args: Any) -> Event:
        if time < self.now:
            raise SchedulingError(f"cannot schedule at {time} before now={self.now}")
        ev = Event(time, next(self._seq), handler, args)
        heapq.heappush(self._queue, ev)
        return ev

    def schedule_in(self, delay: float, handler: Callable[..., Any], *args: Any) -> Event:
        return self.schedule(self.now + delay, handler, *args)

    def __len__(self) -> int:
        return len(self._queue)

    def peek_time(self) -> Optional[float]:
        return self._queue[0].time if self._queue else None

    def run_until(self, t_end: float) -> RunStats:
        queue = self._queue
        start = self.dispatched
        while queue and queue[0].time <= t_end:
            ev = heapq.heappop(queue)
            self.now = ev.time
            ev.handler(*ev.args)
            self.dispatched += 1
        self.now = max(self.now, t_end)
        return RunStats(self.dispatched - start, self.now, len(queue))


@dataclass(frozen=True)
class NetworkModel:
    latency_lo: float = 0.01
    latency_hi: float = 0.1
    q_f_link: float = 0.0
    # (start, end, peer ids): members cannot exchange messages with anyone else
    partition_schedule: Tuple[Tuple[float, float, FrozenSet[int]], ...] = ()

    def __post_init__(self):
        if not 0.0 < self.latency_lo <= self.latency_hi:
            raise ValueError("latency bounds must satisfy 0 < latency_lo <= latency_hi")
        if not 0.0 <= self.q_f_link < 1.0:
            raise ValueError("q_f_link must lie in [0, 1)")
        for start, end, _ in self.partition_schedule:
            if end < start:
                raise ValueError("partition window ends before it starts")


class Node(Protocol):
    alive: bool

    def receive(self, msg: Any) -> None: ...


class Network:
    """Message transport with i.i.d. per-message connection failures."""

    def __init__(
        self,
        sim: Simulator,
        model: NetworkModel,
        rng: random.Random,
        on_send: Optional[Callable[[int, Any], None]] = None,
        on_drop: Optional[Callable[[Any], None]] = None,
    ):
        self.sim = sim
        self.model = model
        self.rng = rng
        self.on_send = on_send
        self.on_drop = on_drop
        self.nodes: Dict[int, Node] = {}
        self.sent = 0
        self.lost = 0
        self.delivered = 0
        self.dropped_dead = 0

    def register(self, peer_id: int, node: Node) -> None:
        self.nodes[peer_id] = node

    def is_live(self, peer_id: int) -> bool:
        node = self.nodes.get(peer_id)
        return node is not None and node.alive

    def latency(self) -> float:
        return self.rng.uniform(self.model.latency_lo, self.model.latency_hi)

    def _partitioned(self, a: int, b: int) -> bool:
        now = self.sim.now
        for start, end, members in self.model.partition_schedule:
            if start <= now < end and ((a in members) != (b in members)):
                return True
        return False

    def send(self, src: int, dst: int, msg: Any) -> bool:
        """Send ``msg``; returns False when the connection failed at send time."""
        self.sent += 1
        if self.on_send is not None:
            self.on_send(src, msg)
        if (self.model.q_f_link and self.rng.random() < self.model.q_f_link) or (
            self.model.partition_schedule and self._partitioned(src, dst)
        ):
            self.lost += 1
            if self.on_drop is not None:
                self.on_drop(msg)
            return False
        self.sim.schedule(self.sim.now + self.latency(), self._deliver, dst, msg)
        return True

    def _deliver(self, dst: int, msg: Any) -> None:
        node = self.nodes.get(dst)
        if node is None or not node.alive:
            self.dropped_dead += 1
            if self.on_drop is not None:
                self.on_drop(msg)
            return
        self.delivered += 1
        node.receive(msg)


class TraceTarget(Protocol):
    def join(self, peer_id: int) -> None: ...

    def leave(self, peer_id: int, graceful: bool) -> None: ...


def apply_trace(sim: Simulator, trace: ChurnTrace, target: TraceTarget) -> None:
    trace.validate()
    for ev in trace:
        if ev.action == "join":
            sim.schedule(ev.time, target.join, ev.peer_id)
        else:
            sim.schedule(ev.time, target.leave, ev.peer_id, ev.action == "leave")
