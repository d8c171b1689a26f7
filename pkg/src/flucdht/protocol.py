"""Peer state machine and the overlay that coordinates interval membership.

Peers talk only through :class:`~flucdht.simcore.Network` messages. Group
membership per leaf interval is kept by :class:`Overlay`, which also drives
split and coalesce as atomic group agreements and serves as the directory a
peer consults when it needs fresh link candidates.
"""

from __future__ import annotations

import itertools
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Set, Tuple

from .keyspace import (
    ROOT,
    IntervalId,
    KeyspaceConfig,
    coalesce,
    contains,
    is_partition,
    split,
)
from .metrics import MetricsCollector
from .routing import (
    CROSS,
    BackupPolicy,
    LinkEntry,
    PeerRef,
    ProtocolViolationError,
    RouteExhaustedError,
    RoutingTable,
    mirror_of,
    next_hop,
    repair_link,
    rt_on_coalesce,
    rt_on_split,
)
from .simcore import Network, Simulator

__all__ = [
    "ProtocolParams",
    "BackupSettings",
    "Record",
    "DataStore",
    "Message",
    "Query",
    "PendingAck",
    "QueryOutcome",
    "resolve_answers",
    "InvariantViolation",
    "Peer",
    "Overlay",
]


class InvariantViolation(AssertionError):
    pass


@dataclass(frozen=True)
class ProtocolParams:
    g_s: int = 16
    g_c: int = 4
    t_delta_ack: float = 0.5
    max_reissues: int = 3
    anti_entropy_period: float = 30.0
    heartbeat_period: float = 30.0
    heartbeat_retries: int = 2
    issuer_retries: int = 3
    query_timeout: float = 10.0
    issuer_retry_delay: float = 1.0
    join_timeout: float = 2.0
    transfer_time_per_item: float = 0.0005
    # fault injection: a forwarder loses the query it just received
    inflight_crash_prob: float = 0.0

    def __post_init__(self):
        if self.g_c < 2:
            raise ValueError("g_c must be >= 2 so data survives one departure")
        if self.g_s < 2 * self.g_c:
            raise ValueError(f"threshold constraint violated: g_s={self.g_s} < 2*g_c={2 * self.g_c}")
        for name in ("t_delta_ack", "anti_entropy_period", "heartbeat_period", "query_timeout", "join_timeout"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.max_reissues < 0 or self.issuer_retries < 0 or self.heartbeat_retries < 0:
            raise ValueError("retry budgets must be >= 0")
        if not 0.0 <= self.inflight_crash_prob < 1.0:
            raise ValueError("inflight_crash_prob must lie in [0, 1)")


@dataclass(frozen=True)
class BackupSettings:
    epsilon: float = 0.01
    window: int = 20
    b_max: int = 8
    adaptive: bool = True
    b_fixed: int = 1

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.window < 1 or self.b_max < 1 or self.b_fixed < 1:
            raise ValueError("window, b_max and b_fixed must be >= 1")

    def policy(self) -> BackupPolicy:
        return BackupPolicy(self.epsilon, self.window, self.b_max, self.adaptive, b=self.b_fixed)


@dataclass(frozen=True)
class Record:
    value: bytes
    version: int
    origin: int

    @property
    def stamp(self) -> Tuple[int, int]:
        return self.version, self.origin


class DataStore:
    """Key to versioned value; newer ``(version, origin)`` stamps win merges."""

    def __init__(self, entries: Optional[Dict[int, Record]] = None):
        self.entries: Dict[int, Record] = dict(entries or {})

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: int) -> bool:
        return key in self.entries

    def get(self, key: int) -> Optional[Record]:
        return self.entries.get(key)

    def put(self, key: int, value: bytes, origin: int) -> Record:
        old = self.entries.get(key)
        rec = Record(value, old.version + 1 if old else 1, origin)
        self.entries[key] = rec
        return rec

    def merge(self, key: int, rec: Record) -> bool:
        old = self.entries.get(key)
        if old is None or rec.stamp > old.stamp:
            self.entries[key] = rec
            return True
        return False

    def merge_all(self, entries: Dict[int, Record]) -> int:
        return sum(self.merge(k, r) for k, r in entries.items())

    def summary(self) -> Dict[int, Tuple[int, int]]:
        return {k: r.stamp for k, r in self.entries.items()}

    def restrict(self, iv: IntervalId, cfg: KeyspaceConfig) -> int:
        drop = [k for k in self.entries if not contains(iv, k, cfg)]
        for k in drop:
            del self.entries[k]
        return len(drop)

    def copy(self) -> "DataStore":
        return DataStore(self.entries)


@dataclass
class Message:
    kind: str
    src: int
    data: Any = None
    weight: int = 1


@dataclass
class Query:
    qid: int
    attempt: int
    kind: str  # lookup | insert | update
    key: int
    value: Optional[bytes]
    issuer: int
    hops: int = 0
    token: int = 0


@dataclass
class PendingAck:
    query: Query
    downstream: PeerRef
    upstream: Optional[int]
    deadline: float
    token: int
    reissues_used: int = 0
    tried: List[int] = field(default_factory=list)


@dataclass
class QueryOutcome:
    query_id: int
    kind: str
    key: int
    issuer: int
    issued_at: float
    value: Optional[bytes] = None
    expected: Optional[bytes] = None
    answers: List[Tuple[Optional[bytes], int]] = field(default_factory=list)
    resolved: bool = False
    resolved_value: Optional[bytes] = None
    needs_reissue: bool = False
    failed: bool = False
    unresolved: bool = False
    duplicate_count: int = 0
    attempt: int = 0
    hops: int = 0
    resolved_at: Optional[float] = None

    @property
    def status(self) -> str:
        if self.resolved:
            return "found" if self.resolved_value is not None else "not_found"
        if self.failed or self.unresolved:
            return "failed"
        return "pending"

    @property
    def stale(self) -> bool:
        return self.expected is not None and self.resolved_value != self.expected


def resolve_answers(outcome: QueryOutcome, answer: Tuple[Optional[bytes], int]) -> QueryOutcome:
    """Fold one more answer into ``outcome``.

    All-equal answers resolve to that value. Disagreement withdraws the
    resolution and asks for a reissue until one value holds a strict
    majority of the answers received so far.
    """
    outcome.answers.append(answer)
    if len(outcome.answers) > 1:
        outcome.duplicate_count += 1
    counts = Counter(value for value, _ in outcome.answers)
    value, n = counts.most_common(1)[0]
    if len(counts) == 1 or 2 * n > len(outcome.answers):
        outcome.resolved = True
        outcome.resolved_value = value
        outcome.needs_reissue = False
    else:
        outcome.resolved = False
        outcome.resolved_value = None
        outcome.needs_reissue = True
    return outcome


@dataclass
class _Coalesce:
    left: IntervalId
    right: IntervalId
    started: float
    data: Dict[IntervalId, Dict[int, Record]] = field(default_factory=dict)
    cost: int = 0
    deferred: List[Tuple[float, int, int, Query]] = field(default_factory=list)


class Peer:
    def __init__(self, pid: int, overlay: "Overlay"):
        self.id = pid
        self.overlay = overlay
        self.alive = True
        self.active = False
        self.interval: Optional[IntervalId] = None
        self.store = DataStore()
        self.rt: Optional[RoutingTable] = None
        self.policy = overlay.backup.policy()
        self.pending: Dict[Tuple[int, int], PendingAck] = {}
        self.write_lock = False
        self.seen: Set[Tuple[int, int]] = set()
        self.outcomes: Dict[int, QueryOutcome] = {}
        self._probes: Dict[int, Tuple[str, int, int]] = {}
        self._suspects: Set[int] = set()
        self._join_contact: Optional[int] = None
        self._join_token = 0

    def __repr__(self) -> str:
        return f"Peer({self.id}@{self.interval}, alive={self.alive})"

    @property
    def ref(self) -> PeerRef:
        return PeerRef(self.id, self.interval)

    @property
    def neighbors(self) -> List[int]:
        group = self.overlay.groups.get(self.interval, ())
        return [p for p in group if p != self.id]

    # transport
    def send(self, dst: int, kind: str, data: Any = None, weight: int = 1) -> bool:
        return self.overlay.net.send(self.id, dst, Message(kind, self.id, data, weight))

    def receive(self, msg: Message) -> None:
        getattr(self, "on_" + msg.kind)(msg)

    # joining
    def start_join(self) -> None:
        ov = self.overlay
        target = ov.pick_join_leaf()
        if target is None:
            if not ov.has_members():
                ov.bootstrap(self)
                return
            ov.sim.schedule_in(ov.params.join_timeout, self._join_retry, self._join_token)
            return
        contact = ov.rng.choice(ov.groups[target])
        self._join_contact = contact
        self._join_token += 1
        self.send(contact, "join_request", self._join_token)
        ov.sim.schedule_in(ov.params.join_timeout, self._join_retry, self._join_token)

    def _join_retry(self, token: int) -> None:
        if self.alive and not self.active and token == self._join_token:
            self._join_token += 1
            self.start_join()

    def on_join_request(self, msg: Message) -> None:
        if not self.active or self.write_lock:
            return
        snapshot = (self.interval, dict(self.store.entries), self.rt.copy(), msg.data)
        # one message per datum plus the routing table
        self.send(msg.src, "join_transfer", snapshot, weight=len(self.store) + 1)

    def on_join_transfer(self, msg: Message) -> None:
        interval, entries, rt, token = msg.data
        ov = self.overlay
        if self.active or token != self._join_token:
            return
        contact = ov.peers.get(msg.src)
        if interval not in ov.groups or contact is None or contact.interval != interval or contact.write_lock:
            return  # topology moved on; the join timer retries
        self._join_token += 1
        self.interval = interval
        self.store = DataStore(entries)
        for entry in rt.all_entries():
            ov.rng.shuffle(entry.peers)
        self.rt = rt
        ov.add_member(self)
        for entry in self.rt.all_entries():
            self.repair(entry)

    # timers
    def start_timers(self) -> None:
        ov = self.overlay
        ov.sim.schedule_in(ov.rng.uniform(0, ov.params.heartbeat_period), self.heartbeat_round)
        ov.sim.schedule_in(ov.rng.uniform(0, ov.params.anti_entropy_period), self.anti_entropy_round)

    def heartbeat_round(self) -> None:
        if not self.alive:
            return
        ov = self.overlay
        ov.sim.schedule_in(ov.params.heartbeat_period, self.heartbeat_round)
        if not self.active:
            return
        for entry in self.rt.all_entries():
            for ref in entry.peers:
                self.probe(ref.peer_id, "link")
            self.repair(entry)
        succ = self.ring_successor()
        if succ is not None:
            self.suspect(succ, attempt=0)

    def ring_successor(self) -> Optional[int]:
        group = self.overlay.groups.get(self.interval)
        if not group or len(group) < 2:
            return None
        ordered = sorted(group)
        i = ordered.index(self.id) if self.id in ordered else -1
        return ordered[(i + 1) % len(ordered)]

    def probe(self, target: int, purpose: str, attempt: int = 0) -> None:
        ov = self.overlay
        token = next(ov.tokens)
        self._probes[token] = (purpose, target, attempt)
        self.send(target, "probe", token)
        ov.sim.schedule_in(ov.params.t_delta_ack, self._probe_timeout, token)

    def on_probe(self, msg: Message) -> None:
        self.send(msg.src, "probe_ack", msg.data)

    def suspect(self, target: int, attempt: int) -> None:
        """Liveness check that prunes ``target`` after ``1 + heartbeat_retries`` silent probes."""
        if attempt == 0 and target in self._suspects:
            return
        self._suspects.add(target)
        self.probe(target, "member", attempt)

    def on_probe_ack(self, msg: Message) -> None:
        probe = self._probes.pop(msg.data, None)
        if probe is None:
            return
        if probe[0] == "link":
            self.policy.observe(False)
        else:
            self._suspects.discard(probe[1])

    def _probe_timeout(self, token: int) -> None:
        probe = self._probes.pop(token, None)
        if probe is None or not self.alive or not self.active:
            return
        purpose, target, attempt = probe
        ov = self.overlay
        if purpose == "link":
            self.policy.observe(True)
            self.rt.remove_peer(target)
            for entry in self.rt.all_entries():
                self.repair(entry)
            # the silent link counts as the first missed heartbeat
            if ov.params.heartbeat_retries == 0:
                ov.prune(target, by=self)
            elif target not in self._suspects:
                self.suspect(target, attempt=1)
        elif attempt < ov.params.heartbeat_retries:
            self.suspect(target, attempt + 1)
        else:
            self._suspects.discard(target)
            ov.prune(target, by=self)

    def repair(self, entry: LinkEntry) -> None:
        """Refill ``entry`` up to the current backup factor.

        Only the owning side repairs, except that an empty entry is always
        refilled since nothing else would restore it.
        """
        b = self.policy.b
        if len(entry.peers) >= b or not (entry.owner or not entry.peers):
            return
        ov = self.overlay
        before = set(entry.peer_ids())
        candidates = ov.candidates(entry.target_prefix, exclude=self.id, k=b)
        ov.metrics.count("repair", 1, self.id)
        repair_link(self.rt, entry.level, candidates, ov.rng, b)
        for ref in entry.peers:
            if ref.peer_id not in before:
                self.send(ref.peer_id, "link_add", self.ref)

    def on_link_add(self, msg: Message) -> None:
        if not self.active:
            return
        other: PeerRef = msg.data
        own, theirs = self.interval.path, other.interval.path
        if other.interval == mirror_of(self.interval):
            entry = self.rt.cross_entry
        else:
            level = next((i + 1 for i, (a, b) in enumerate(zip(own, theirs)) if a != b), None)
            entry = self.rt.entries.get(level) if level is not None else None
        if entry is not None:
            entry.add(other, max(self.policy.b, len(entry.peers)) if entry.peers else None)

    def on_leave_notice(self, msg: Message) -> None:
        if not self.active:
            return
        if self.rt.remove_peer(msg.src):
            for entry in self.rt.all_entries():
                self.repair(entry)

    # anti-entropy
    def anti_entropy_round(self) -> None:
        if not self.alive:
            return
        ov = self.overlay
        ov.sim.schedule_in(ov.params.anti_entropy_period, self.anti_entropy_round)
        if not self.active or self.write_lock:
            return
        nbrs = self.neighbors
        if not nbrs:
            return
        self.send(ov.rng.choice(nbrs), "ae_summary", (self.interval, self.store.summary()))

    def on_ae_summary(self, msg: Message) -> None:
        if not self.active or self.write_lock:
            return
        interval, theirs = msg.data
        if interval != self.interval:
            return
        mine = self.store.entries
        push = {k: r for k, r in mine.items() if k not in theirs or r.stamp > theirs[k]}
        pull = [k for k, stamp in theirs.items() if k not in mine or stamp > mine[k].stamp]
        if push:
            self.send(msg.src, "ae_data", push, weight=len(push))
        if pull:
            self.send(msg.src, "ae_request", pull)

    def on_ae_request(self, msg: Message) -> None:
        if not self.active:
            return
        entries = {k: self.store.entries[k] for k in msg.data if k in self.store.entries}
        if entries:
            self.send(msg.src, "ae_data", entries, weight=len(entries))

    def on_ae_data(self, msg: Message) -> None:
        if not self.active:
            return
        cfg = self.overlay.cfg
        for k, rec in msg.data.items():
            if contains(self.interval, k, cfg):
                self.store.merge(k, rec)

    def on_write(self, msg: Message) -> None:
        if not self.active:
            return
        key, rec = msg.data
        if contains(self.interval, key, self.overlay.cfg):
            self.store.merge(key, rec)

    # queries
    def issue(self, kind: str, key: int, value: Optional[bytes] = None, expected: Optional[bytes] = None) -> QueryOutcome:
        ov = self.overlay
        outcome = QueryOutcome(next(ov.query_ids), kind, key, self.id, ov.sim.now, value=value, expected=expected)
        self.outcomes[outcome.query_id] = outcome
        ov.metrics.track(outcome)
        self._issue_attempt(outcome)
        return outcome

    def _issue_attempt(self, outcome: QueryOutcome) -> None:
        ov = self.overlay
        q = Query(outcome.query_id, outcome.attempt, outcome.kind, outcome.key, outcome.value, self.id)
        ov.sim.schedule_in(ov.params.query_timeout, self._maybe_retry, outcome.query_id, outcome.attempt)
        self.handle_query(q, upstream=None)

    def _maybe_retry(self, qid: int, attempt: int) -> None:
        outcome = self.outcomes.get(qid)
        if not self.alive or outcome is None or attempt != outcome.attempt:
            return
        if outcome.resolved or outcome.failed or outcome.unresolved:
            return
        if outcome.attempt < self.overlay.params.issuer_retries:
            outcome.attempt += 1
            self.overlay.metrics.record("issuer_reissues")
            self._issue_attempt(outcome)
        elif outcome.needs_reissue:
            outcome.unresolved = True
            self.overlay.metrics.record("consistency_violations")
        else:
            outcome.failed = True

    def on_query(self, msg: Message) -> None:
        self.handle_query(msg.data, upstream=msg.src)

    def handle_query(self, q: Query, upstream: Optional[int]) -> None:
        ov = self.overlay
        if not self.active:
            return
        tag = (q.qid, q.attempt)
        if upstream is not None:
            if tag in self.seen:
                self.send(upstream, "advice", tag)
                return
            if ov.params.inflight_crash_prob and ov.rng.random() < ov.params.inflight_crash_prob:
                ov.token_dropped(q.token)
                return
        self.seen.add(tag)
        if contains(self.interval, q.key, ov.cfg):
            if upstream is not None:
                self.send(upstream, "advice", tag)
            if q.kind == "lookup":
                rec = self.store.get(q.key)
                self.answer(q, rec.value if rec else None)
            elif self.write_lock:
                ov.defer_write(self, q)
            else:
                self.apply_write(q)
        else:
            self.forward_with_ack(q, upstream)
            if upstream is not None:
                self.send(upstream, "advice", tag)

    def apply_write(self, q: Query, answer: bool = True) -> Record:
        rec = self.store.put(q.key, q.value, self.id)
        for n in self.neighbors:
            self.send(n, "write", (q.key, rec))
        if answer:
            self.answer(q, q.value)
        return rec

    def answer(self, q: Query, value: Optional[bytes]) -> None:
        data = (q.qid, q.attempt, value, q.hops)
        if q.issuer == self.id:
            self.on_answer(Message("answer", self.id, data))
        else:
            self.send(q.issuer, "answer", data)

    def forward_with_ack(self, q: Query, upstream: Optional[int]) -> None:
        ov = self.overlay
        try:
            ref = next_hop(self.rt, q.key, ov.cfg)
        except RouteExhaustedError:
            self.fail(q)
            return
        fwd = Query(q.qid, q.attempt, q.kind, q.key, q.value, q.issuer, q.hops + 1, next(ov.tokens))
        pending = PendingAck(fwd, ref, upstream, ov.sim.now + ov.params.t_delta_ack, fwd.token, tried=[ref.peer_id])
        self.pending[(q.qid, q.attempt)] = pending
        self._send_query(ref.peer_id, fwd, pending)

    def _send_query(self, dst: int, fwd: Query, pending: PendingAck) -> None:
        ov = self.overlay
        ov.token_sent(fwd.token)
        self.send(dst, "query", fwd)
        ov.sim.schedule(pending.deadline, self.on_ack_timeout, (fwd.qid, fwd.attempt), pending.deadline)

    def on_advice(self, msg: Message) -> None:
        pending = self.pending.pop(msg.data, None)
        if pending is not None:
            self.overlay.token_done(pending.token)
            self.policy.observe(False)

    def on_ack_timeout(self, tag: Tuple[int, int], deadline: float) -> None:
        pending = self.pending.get(tag)
        if pending is None or pending.deadline != deadline or not self.alive:
            return
        ov = self.overlay
        if ov.token_done(pending.token):
            ov.metrics.record("duplicate_queries")
        self.policy.observe(True)
        # the hop may just be slow; a probe decides whether to drop the link
        self.probe(pending.downstream.peer_id, "link")
        if contains(self.interval, pending.query.key, ov.cfg):
            # a split or coalesce made the key ours while we waited
            del self.pending[tag]
            self.handle_query(pending.query, upstream=None)
            return
        if pending.reissues_used < ov.params.max_reissues:
            try:
                ref = next_hop(self.rt, pending.query.key, ov.cfg, exclude=pending.tried)
            except RouteExhaustedError:
                ref = None
            if ref is not None:
                q = pending.query
                fwd = Query(q.qid, q.attempt, q.kind, q.key, q.value, q.issuer, q.hops, next(ov.tokens))
                pending.query = fwd
                pending.token = fwd.token
                pending.downstream = ref
                pending.tried.append(ref.peer_id)
                pending.reissues_used += 1
                pending.deadline = ov.sim.now + ov.params.t_delta_ack
                ov.metrics.record("reissues")
                self._send_query(ref.peer_id, fwd, pending)
                return
        del self.pending[tag]
        self.fail(pending.query)

    def fail(self, q: Query) -> None:
        data = (q.qid, q.attempt)
        if q.issuer == self.id:
            self.on_failure(Message("failure", self.id, data))
        else:
            self.send(q.issuer, "failure", data)

    def on_failure(self, msg: Message) -> None:
        qid, attempt = msg.data
        outcome = self.outcomes.get(qid)
        if outcome is None or outcome.resolved or attempt != outcome.attempt:
            return
        self.overlay.sim.schedule_in(self.overlay.params.issuer_retry_delay, self._maybe_retry, qid, attempt)

    def on_answer(self, msg: Message) -> None:
        qid, attempt, value, hops = msg.data
        outcome = self.outcomes.get(qid)
        if outcome is None or outcome.unresolved:
            return
        was_resolved = outcome.resolved
        resolve_answers(outcome, (value, msg.src))
        ov = self.overlay
        if outcome.resolved and not was_resolved:
            outcome.hops = hops
            outcome.resolved_at = ov.sim.now
            outcome.failed = False
            if outcome.kind != "lookup":
                ov.on_write_acked(outcome)
        if outcome.needs_reissue:
            if was_resolved:
                ov.metrics.record("consistency_conflicts")
            # move to a fresh attempt so the extra answer comes from a new route
            ov.sim.schedule_in(0.0, self._maybe_retry, qid, outcome.attempt)


class Overlay:
    """Registry of leaf intervals and their groups, plus the peer population."""

    def __init__(
        self,
        sim: Simulator,
        net: Network,
        cfg: KeyspaceConfig,
        params: ProtocolParams,
        backup: BackupSettings,
        rng: random.Random,
        metrics: MetricsCollector,
        strict: bool = False,
    ):
        self.sim = sim
        self.net = net
        self.cfg = cfg
        self.params = params
        self.backup = backup
        self.rng = rng
        self.metrics = metrics
        self.strict = strict
        self.groups: Dict[IntervalId, List[int]] = {ROOT: []}
        self.peers: Dict[int, Peer] = {}
        self.coalescing: Dict[IntervalId, _Coalesce] = {}
        self.blocked: Set[IntervalId] = set()
        self.scheduled: Set[Tuple[str, IntervalId]] = set()
        self.tokens = itertools.count(1)
        self.query_ids = itertools.count(1)
        self._token_state: Dict[int, bool] = {}
        self._subtree_cache: Dict[IntervalId, List[IntervalId]] = {}
        self._underfull: Set[IntervalId] = set()
        self.write_listeners: List[Any] = []
        net.on_drop = self._on_drop

    # population
    def join(self, pid: int) -> Peer:
        peer = Peer(pid, self)
        self.peers[pid] = peer
        self.net.register(pid, peer)
        self.metrics.record("joins")
        peer.start_timers()
        peer.start_join()
        return peer

    def leave(self, pid: int, graceful: bool = True) -> None:
        peer = self.peers.get(pid)
        if peer is None or not peer.alive:
            return
        self.metrics.record("graceful_leaves" if graceful else "crashes")
        if graceful and peer.active:
            targets = set(peer.neighbors) | peer.rt.known_peer_ids()
            for t in sorted(targets):
                peer.send(t, "leave_notice")
            self._remove_member(peer)
        peer.alive = False

    def prune(self, pid: int, by: Optional[Peer] = None) -> None:
        peer = self.peers.get(pid)
        if peer is None or peer.interval not in self.groups or pid not in self.groups[peer.interval]:
            return
        if peer.alive:
            return  # a live peer answers its own probes; a false suspicion is dropped
        self.metrics.record("prunes")
        self.metrics.count("prune", len(self.groups[peer.interval]) - 1, by.id if by else None)
        self._remove_member(peer)

    def bootstrap(self, peer: Peer) -> None:
        if any(self.groups.values()):
            raise ProtocolViolationError("bootstrap into a populated overlay")
        self.groups = {ROOT: []}
        self.coalescing.clear()
        self.blocked.clear()
        self._topology_changed()
        peer.interval = ROOT
        peer.rt = RoutingTable(ROOT)
        peer.store = DataStore()
        self.add_member(peer)

    def has_members(self) -> bool:
        return any(self.groups.values())

    def pick_join_leaf(self) -> Optional[IntervalId]:
        live = [iv for iv, g in self.groups.items() if g and iv not in self.coalescing]
        return self.rng.choice(live) if live else None

    def add_member(self, peer: Peer) -> None:
        group = self.groups[peer.interval]
        self.metrics.count("member_announce", len(group), peer.id)
        group.append(peer.id)
        peer.active = True
        self._size_changed(peer.interval)
        if len(group) > self.params.g_s:
            self._schedule("split", peer.interval)

    def _remove_member(self, peer: Peer) -> None:
        group = self.groups.get(peer.interval)
        if group is not None and peer.id in group:
            group.remove(peer.id)
        peer.active = False
        self._size_changed(peer.interval)
        self.check_underfull(peer.interval)

    def live_population(self) -> int:
        return sum(1 for g in self.groups.values() for p in g if self.peers[p].alive)

    def active_peers(self) -> List[Peer]:
        return [self.peers[p] for g in self.groups.values() for p in g if self.peers[p].alive]

    # thresholds
    def _size_changed(self, iv: IntervalId) -> None:
        group = self.groups.get(iv)
        if group is not None and len(group) < self.params.g_c and iv != ROOT:
            self._underfull.add(iv)
        else:
            self._underfull.discard(iv)
        self.metrics.set_degraded(self.sim.now, bool(self._underfull))

    def _schedule(self, what: str, iv: IntervalId) -> None:
        if (what, iv) in self.scheduled:
            return
        self.scheduled.add((what, iv))
        handler = self.run_split_protocol if what == "split" else self.run_coalesce_protocol
        self.sim.schedule_in(0.0, self._run_scheduled, what, iv, handler)

    def _run_scheduled(self, what, iv, handler) -> None:
        self.scheduled.discard((what, iv))
        handler(iv)

    def check_underfull(self, iv: IntervalId) -> None:
        group = self.groups.get(iv)
        if group is not None and iv != ROOT and len(group) < self.params.g_c:
            self._schedule("coalesce", iv)

    def maintenance_tick(self) -> None:
        """Re-check thresholds of every leaf, including blocked coalesces."""
        for iv in list(self.groups):
            if iv not in self.groups or iv in self.coalescing:
                continue
            n = len(self.groups[iv])
            if n > self.params.g_s:
                self._schedule("split", iv)
            elif n < self.params.g_c and iv != ROOT:
                self._schedule("coalesce", iv)

    # topology
    def _topology_changed(self) -> None:
        self._subtree_cache.clear()
        self._underfull = {iv for iv in self._underfull if iv in self.groups}

    def leaves_under(self, prefix: IntervalId) -> List[IntervalId]:
        cached = self._subtree_cache.get(prefix)
        if cached is None:
            p = prefix.path
            cached = [iv for iv in self.groups if iv.path.startswith(p)]
            self._subtree_cache[prefix] = cached
        return cached

    def covering_leaf(self, iv: IntervalId) -> Optional[IntervalId]:
        for d in range(iv.depth, -1, -1):
            cand = iv.prefix(d)
            if cand in self.groups:
                return cand
        return None

    def leaf_of(self, key: int) -> IntervalId:
        for iv in self.groups:
            if contains(iv, key, self.cfg):
                return iv
        raise InvariantViolation(f"no leaf contains key {key}")

    def node_exists(self, iv: IntervalId) -> bool:
        return iv in self.groups or bool(self.leaves_under(iv))

    def candidates(self, prefix: IntervalId, exclude: Optional[int] = None, k: int = 1) -> List[PeerRef]:
        """Registered members able to serve links into ``prefix``'s subtree."""
        leaves = self.leaves_under(prefix)
        if not leaves:
            cover = self.covering_leaf(prefix)
            leaves = [cover] if cover is not None else []
        elif len(leaves) > 2 * k:
            leaves = self.rng.sample(leaves, 2 * k)
        out = []
        for iv in leaves:
            out.extend(PeerRef(p, iv) for p in self.groups[iv] if p != exclude)
        return out

    def run_split_protocol(self, iv: IntervalId) -> None:
        group = self.groups.get(iv)
        if group is None or len(group) <= self.params.g_s or iv.depth >= self.cfg.l_bits:
            return
        if iv in self.coalescing:
            return  # re-checked once the coalesce completes
        members = sorted(group)
        halves = (members[0::2], members[1::2])
        left, right = split(iv, self.cfg)
        del self.groups[iv]
        self.groups[left] = halves[0]
        self.groups[right] = halves[1]
        self._topology_changed()
        refs = {
            left: [PeerRef(p, left) for p in halves[0]],
            right: [PeerRef(p, right) for p in halves[1]],
        }
        for half, other in ((left, right), (right, left)):
            mirror = mirror_of(half)
            mirror_refs = self.candidates(mirror, k=self.backup.b_max) if mirror and self.node_exists(mirror) else []
            others = refs[other]
            for i, pid in enumerate(self.groups[half]):
                peer = self.peers[pid]
                peer.interval = half
                peer.store.restrict(half, self.cfg)
                rotated = others[i % len(others):] + others[: i % len(others)]
                rt_on_split(peer.rt, half, rotated, mirror_refs, peer.policy.b)
                self.metrics.count("rt_update", 1)
            if mirror is not None and mirror in self.groups:
                for pid in self.groups[mirror]:
                    peer = self.peers[pid]
                    entry = peer.rt.cross_entry
                    if entry is None or entry.target_prefix != half:
                        peer.rt.cross_entry = entry = LinkEntry(CROSS, half, owner=mirror.path < half.path)
                    for ref in refs[half]:
                        entry.add(ref, peer.policy.b)
                    self.metrics.count("link_add", 1)
        self.metrics.record("splits")
        for half in (left, right):
            self._size_changed(half)
        self._size_changed(iv)
        self.check_invariants(after="split", halves=(left, right))
        for half in (left, right):
            if len(self.groups[half]) > self.params.g_s:
                self._schedule("split", half)

    def run_coalesce_protocol(self, iv: IntervalId) -> None:
        group = self.groups.get(iv)
        if group is None or iv == ROOT or len(group) >= self.params.g_c:
            self.blocked.discard(iv)
            return
        sib = iv.sibling()
        if iv in self.coalescing or sib in self.coalescing:
            return
        if sib not in self.groups:
            if iv not in self.blocked:
                self.metrics.record("blocked_coalesces")
            self.blocked.add(iv)
            return
        self.blocked.discard(iv)
        left, right = (iv, sib) if iv.path[-1] == "L" else (sib, iv)
        data = {side: self._union_store(side) for side in (left, right)}
        n_l, n_r = len(self.groups[left]), len(self.groups[right])
        # direct transfer: every peer receives every datum of the other side
        cost = n_l * len(data[right]) + n_r * len(data[left])
        state = _Coalesce(left, right, self.sim.now, data, cost)
        self.coalescing[left] = self.coalescing[right] = state
        for side in (left, right):
            for pid in self.groups[side]:
                self.peers[pid].write_lock = True
        self.metrics.count("replicate", cost)
        per_receiver = max(len(data[left]), len(data[right]))
        delay = self.net.model.latency_hi + per_receiver * self.params.transfer_time_per_item
        self.sim.schedule_in(delay, self._finish_coalesce, state)

    def _union_store(self, iv: IntervalId) -> Dict[int, Record]:
        merged = DataStore()
        for pid in self.groups[iv]:
            peer = self.peers[pid]
            if peer.alive:
                merged.merge_all(peer.store.entries)
        return merged.entries

    def defer_write(self, peer: Peer, q: Query) -> None:
        state = self.coalescing.get(peer.interval)
        if state is None:
            peer.apply_write(q)
            return
        state.deferred.append((self.sim.now, next(self.tokens), peer.id, q))

    def _finish_coalesce(self, state: _Coalesce) -> None:
        left, right = state.left, state.right
        parent = coalesce(left, right)
        members = self.groups.pop(left) + self.groups.pop(right)
        del self.coalescing[left]
        del self.coalescing[right]
        self.groups[parent] = members
        self._topology_changed()
        mirror = mirror_of(parent)
        mirror_refs = self.candidates(mirror, k=self.backup.b_max) if mirror and self.node_exists(mirror) else []
        for pid in members:
            peer = self.peers[pid]
            peer.store.merge_all(state.data[left])
            peer.store.merge_all(state.data[right])
            peer.interval = parent
            rt_on_coalesce(peer.rt, parent, mirror_refs, peer.policy.b)
            peer.write_lock = False
            self.metrics.count("rt_update", 1)
        applied = set()
        live = [self.peers[p] for p in members if self.peers[p].alive]
        for _, _, pid, q in sorted(state.deferred, key=lambda d: (d[0], d[1])):
            if q.qid in applied or not live:
                continue
            applied.add(q.qid)
            receiver = self.peers[pid] if self.peers[pid].alive and pid in members else live[0]
            receiver.apply_write(q)
            self.metrics.record("deferred_writes_applied")
        self.metrics.record("coalesces")
        self._size_changed(left)
        self._size_changed(right)
        self._size_changed(parent)
        self.check_invariants(after="coalesce")
        if len(members) > self.params.g_s:
            self._schedule("split", parent)
        self.check_underfull(parent)

    # query token bookkeeping for duplicate detection
    def token_sent(self, token: int) -> None:
        self._token_state[token] = True

    def token_dropped(self, token: int) -> None:
        if token in self._token_state:
            self._token_state[token] = False

    def token_done(self, token: int) -> bool:
        """Forget ``token``; True if its query reached (or is still reaching) a peer."""
        return self._token_state.pop(token, False)

    def _on_drop(self, msg: Message) -> None:
        if msg.kind == "query":
            self.token_dropped(msg.data.token)

    def on_write_acked(self, outcome: QueryOutcome) -> None:
        for listener in self.write_listeners:
            listener(outcome)

    # invariants
    def check_invariants(self, after: str = "", halves: Tuple[IntervalId, ...] = ()) -> List[str]:
        if not self.strict:
            return []
        problems = []
        if not is_partition(self.groups.keys(), self.cfg):
            problems.append("leaf intervals do not partition the key space")
        for half in halves:
            if len(self.groups.get(half, ())) < self.params.g_c:
                problems.append(f"{half} has fewer than g_c members right after a split")
        for iv, group in self.groups.items():
            for pid in group:
                peer = self.peers[pid]
                if peer.interval != iv:
                    problems.append(f"peer {pid} registered at {iv} believes it is at {peer.interval}")
                    continue
                if iv not in self.coalescing:
                    bad = [k for k in peer.store.entries if not contains(iv, k, self.cfg)]
                    if bad:
                        problems.append(f"peer {pid} at {iv} stores {len(bad)} foreign keys")
                try:
                    peer.rt.check()
                except ProtocolViolationError as exc:
                    problems.append(str(exc))
        if problems:
            self.metrics.record("invariant_violations", len(problems))
            raise InvariantViolation(f"after {after}: " + "; ".join(problems[:5]))
        return problems

    def stores_converged(self) -> bool:
        """True when every leaf's live members hold identical stores."""
        if self.coalescing:
            return False
        for group in self.groups.values():
            stores = [self.peers[p].store.entries for p in group if self.peers[p].alive]
            if any(s != stores[0] for s in stores[1:]):
                return False
        return True
