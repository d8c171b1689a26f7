"""Per-peer routing tables with backup links.

Every peer keeps one :class:`LinkEntry` per level of its interval path. The
entry at level ``d`` points into the subtree obtained by flipping bit ``d`` of
the peer's own path; its first peer is the active link, the rest are backups.
"""

from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, Iterable, List, Optional, Sequence, Union

from .keyspace import IntervalId, KeyspaceConfig, InvalidPairError, first_diff_level, flip

__all__ = [
    "RoutingError",
    "RouteExhaustedError",
    "ProtocolViolationError",
    "PeerRef",
    "LinkEntry",
    "BackupPolicy",
    "RoutingTable",
    "CROSS",
    "mirror_of",
    "next_hop",
    "hop_candidates",
    "backup_size",
    "estimate_qf",
    "assign_link_ownership",
    "repair_link",
    "rt_on_split",
    "rt_on_coalesce",
]

CROSS = "cross"
Level = Union[int, str]


class RoutingError(RuntimeError):
    pass


class RouteExhaustedError(RoutingError):
    pass


class ProtocolViolationError(RoutingError):
    pass


@dataclass(frozen=True)
class PeerRef:
    peer_id: int
    interval: IntervalId = field(default=IntervalId(""), compare=False)

    def __repr__(self) -> str:
        return f"PeerRef({self.peer_id}@{self.interval})"


@dataclass
class LinkEntry:
    level: Level
    target_prefix: IntervalId
    peers: List[PeerRef] = field(default_factory=list)
    owner: bool = False
    degraded: bool = False

    def peer_ids(self) -> List[int]:
        return [p.peer_id for p in self.peers]

    def has(self, peer_id: int) -> bool:
        return any(p.peer_id == peer_id for p in self.peers)

    def add(self, ref: PeerRef, cap: Optional[int] = None) -> bool:
        if self.has(ref.peer_id) or (cap is not None and len(self.peers) >= cap):
            return False
        self.peers.append(ref)
        return True

    def remove(self, peer_id: int) -> bool:
        before = len(self.peers)
        self.peers = [p for p in self.peers if p.peer_id != peer_id]
        return len(self.peers) != before

    @property
    def active(self) -> Optional[PeerRef]:
        return self.peers[0] if self.peers else None

    def copy(self) -> "LinkEntry":
        return LinkEntry(self.level, self.target_prefix, list(self.peers), self.owner, self.degraded)


def backup_size(q_f_est: float, epsilon: float, b_max: int = 8) -> int:
    """Smallest ``b >= 1`` with ``q_f_est ** b <= epsilon``, clamped to ``b_max``."""
    if not 0.0 < q_f_est < 1.0:
        raise ValueError(f"q_f_est must lie in (0, 1), got {q_f_est}")
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    b = max(1, math.ceil(math.log(epsilon) / math.log(q_f_est) - 1e-9))
    # guard the float division against off-by-one in both directions
    while b > 1 and q_f_est ** (b - 1) <= epsilon * (1 + 1e-12):
        b -= 1
    while q_f_est**b > epsilon * (1 + 1e-12):
        b += 1
    return min(b, b_max)


def estimate_qf(history: Sequence[bool], window: int) -> float:
    """Add-one smoothed failure fraction over the last ``window`` outcomes.

    ``history`` holds one boolean per link probe, True meaning the probe
    failed.
    """
    recent = list(history)[-window:] if window > 0 else []
    failures = sum(1 for failed in recent if failed)
    return (failures + 1) / (len(recent) + 2)


@dataclass
class BackupPolicy:
    """Backup factor and the connection-failure estimate it is derived from."""

    epsilon: float = 0.01
    window: int = 20
    b_max: int = 8
    adaptive: bool = True
    b: int = 1
    q_f_est: float = 0.5
    history: Deque[bool] = field(default_factory=deque, repr=False)

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.window < 1 or self.b_max < 1 or self.b < 1:
            raise ValueError("window, b_max and b must be positive")
        self.history = deque(self.history, maxlen=self.window)
        self._refresh()

    def observe(self, failed: bool) -> int:
        self.history.append(failed)
        self._refresh()
        return self.b

    def _refresh(self) -> None:
        self.q_f_est = estimate_qf(self.history, self.window)
        if self.adaptive:
            self.b = backup_size(self.q_f_est, self.epsilon, self.b_max)


@dataclass
class RoutingTable:
    own_interval: IntervalId
    entries: Dict[int, LinkEntry] = field(default_factory=dict)
    cross_entry: Optional[LinkEntry] = None

    def entry(self, level: Level) -> Optional[LinkEntry]:
        if level == CROSS:
            return self.cross_entry
        return self.entries.get(level)

    def all_entries(self) -> List[LinkEntry]:
        out = [self.entries[lvl] for lvl in sorted(self.entries)]
        if self.cross_entry is not None:
            out.append(self.cross_entry)
        return out

    def remove_peer(self, peer_id: int) -> int:
        return sum(e.remove(peer_id) for e in self.all_entries())

    def known_peer_ids(self) -> set:
        return {p.peer_id for e in self.all_entries() for p in e.peers}

    def copy(self) -> "RoutingTable":
        return RoutingTable(
            self.own_interval,
            {lvl: e.copy() for lvl, e in self.entries.items()},
            self.cross_entry.copy() if self.cross_entry else None,
        )

    def check(self) -> None:
        """Raise if the one-entry-per-level invariant is broken."""
        depth = self.own_interval.depth
        if sorted(self.entries) != list(range(1, depth + 1)):
            raise ProtocolViolationError(
                f"RT at {self.own_interval} has levels {sorted(self.entries)}, expected 1..{depth}"
            )
        for lvl, e in self.entries.items():
            if e.level != lvl or e.target_prefix != flip(self.own_interval, lvl):
                raise ProtocolViolationError(f"entry {lvl} of {self.own_interval} targets {e.target_prefix}")
            if len(set(e.peer_ids())) != len(e.peers):
                raise ProtocolViolationError(f"duplicate peers in entry {lvl} of {self.own_interval}")


def mirror_of(iv: IntervalId) -> Optional[IntervalId]:
    """Same-depth interval with bit 1 flipped; only defined from depth 2 on."""
    if iv.depth < 2:
        return None
    return IntervalId(("R" if iv.path[0] == "L" else "L") + iv.path[1:])


def assign_link_ownership(a: IntervalId, b_iv: IntervalId) -> IntervalId:
    """The endpoint that re-establishes a broken link between two intervals."""
    if a == b_iv:
        raise InvalidPairError(f"a link needs two distinct intervals, got {a} twice")
    return min(a, b_iv, key=lambda iv: iv.path)


def hop_candidates(rt: RoutingTable, key: int, cfg: KeyspaceConfig) -> List[PeerRef]:
    """Ordered next-hop candidates for ``key``: active link first, then backups.

    At level 1 the cross entry widens the pool; it goes first when its target
    contains the key.
    """
    level = first_diff_level(rt.own_interval, key, cfg)
    if level is None:
        raise RoutingError(f"key {key} is local to {rt.own_interval}")
    entry = rt.entries.get(level)
    pool = list(entry.peers) if entry else []
    cross = rt.cross_entry
    if level == 1 and cross is not None and cross.peers:
        if first_diff_level(cross.target_prefix, key, cfg) is None:
            pool = cross.peers + pool
        else:
            pool = pool + cross.peers
        seen = set()
        pool = [p for p in pool if not (p.peer_id in seen or seen.add(p.peer_id))]
    return pool


def next_hop(
    rt: RoutingTable,
    key: int,
    cfg: KeyspaceConfig,
    is_live: Optional[Callable[[int], bool]] = None,
    exclude: Iterable[int] = (),
) -> PeerRef:
    excluded = set(exclude)
    for ref in hop_candidates(rt, key, cfg):
        if ref.peer_id in excluded:
            continue
        if is_live is None or is_live(ref.peer_id):
            return ref
    raise RouteExhaustedError(f"no live link from {rt.own_interval} toward key {key}")


def repair_link(
    rt: RoutingTable,
    level: Level,
    candidates: Sequence[PeerRef],
    rng: random.Random,
    b: int,
    is_live: Optional[Callable[[int], bool]] = None,
) -> RoutingTable:
    entry = rt.entry(level)
    if entry is None:
        raise RoutingError(f"no entry at level {level} of {rt.own_interval}")
    if is_live is not None:
        entry.peers = [p for p in entry.peers if is_live(p.peer_id)]
    present = set(entry.peer_ids())
    pool = [c for c in candidates if c.peer_id not in present]
    need = b - len(entry.peers)
    if need > 0 and pool:
        entry.peers.extend(rng.sample(pool, min(need, len(pool))))
    entry.degraded = len(entry.peers) < b
    return rt


def _new_entry(own: IntervalId, level: Level, target: IntervalId, peers: Sequence[PeerRef], cap: int) -> LinkEntry:
    entry = LinkEntry(level, target, owner=assign_link_ownership(own, target) == own)
    for p in peers:
        entry.add(p, cap)
    entry.degraded = len(entry.peers) < cap
    return entry


def rt_on_split(
    rt: RoutingTable,
    new_interval: IntervalId,
    peers_other_half: Sequence[PeerRef],
    mirror_peers: Sequence[PeerRef] = (),
    b: int = 1,
) -> RoutingTable:
    """Deepen ``rt`` by one level after the owning peer's interval split."""
    if new_interval.depth != rt.own_interval.depth + 1 or not rt.own_interval.is_ancestor_of(new_interval):
        raise ProtocolViolationError(f"{new_interval} is not a half of {rt.own_interval}")
    if not peers_other_half:
        raise ProtocolViolationError(f"split of {rt.own_interval} left the sibling half empty")
    rt.own_interval = new_interval
    level = new_interval.depth
    rt.entries[level] = _new_entry(new_interval, level, new_interval.sibling(), peers_other_half, b)
    mirror = mirror_of(new_interval)
    rt.cross_entry = _new_entry(new_interval, CROSS, mirror, mirror_peers, b) if mirror and mirror_peers else None
    return rt


def rt_on_coalesce(
    rt: RoutingTable,
    parent: IntervalId,
    mirror_peers: Sequence[PeerRef] = (),
    b: int = 1,
) -> RoutingTable:
    """Truncate ``rt`` by one level after the owning peer's interval merged."""
    if rt.own_interval.depth == 0 or rt.own_interval.parent() != parent:
        raise ProtocolViolationError(f"{parent} is not the parent of {rt.own_interval}")
    rt.entries.pop(rt.own_interval.depth, None)
    rt.own_interval = parent
    mirror = mirror_of(parent)
    rt.cross_entry = _new_entry(parent, CROSS, mirror, mirror_peers, b) if mirror and mirror_peers else None
    return rt
