"""Small overlays assembled directly, for experiments and tests.

:class:`Harness` wires a simulator, network, metrics and overlay without a
churn trace. Groups can be laid out by hand with :meth:`Harness.populate` or
grown through the real join protocol with :meth:`Harness.grow`.
"""

from __future__ import annotations

import random
from typing import Dict, List, Mapping, Optional, Union

from .keyspace import IntervalId, KeyspaceConfig, flip
from .metrics import MetricsCollector
from .protocol import BackupSettings, Overlay, Peer, ProtocolParams, Record
from .routing import CROSS, LinkEntry, RoutingTable, mirror_of
from .simcore import Network, NetworkModel, Simulator

__all__ = ["Harness"]


class Harness:
    def __init__(
        self,
        l_bits: int = 8,
        params: Optional[ProtocolParams] = None,
        backup: Optional[BackupSettings] = None,
        network: Optional[NetworkModel] = None,
        seed: int = 0,
        strict: bool = True,
    ):
        self.cfg = KeyspaceConfig(l_bits)
        self.params = params or ProtocolParams()
        self.backup = backup or BackupSettings()
        self.sim = Simulator()
        self.metrics = MetricsCollector(seed)
        self.net = Network(self.sim, network or NetworkModel(), random.Random(seed), on_send=self.metrics.on_send)
        self.overlay = Overlay(
            self.sim, self.net, self.cfg, self.params, self.backup, random.Random(seed + 1), self.metrics, strict
        )
        self.rng = random.Random(seed + 2)
        self._next_id = 0

    @property
    def groups(self) -> Dict[IntervalId, List[int]]:
        return self.overlay.groups

    def peer(self, pid: int) -> Peer:
        return self.overlay.peers[pid]

    def members(self, iv: Union[str, IntervalId]) -> List[Peer]:
        iv = IntervalId.parse(iv) if isinstance(iv, str) else iv
        return [self.overlay.peers[p] for p in self.overlay.groups[iv]]

    def new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def populate(
        self,
        layout: Mapping[Union[str, IntervalId], int],
        b: Optional[int] = None,
        timers: bool = False,
    ) -> None:
        """Install leaf groups of the given sizes with fully linked routing tables.

        ``layout`` maps labels such as ``"ll2"`` to member counts and must
        partition the key space. Each link entry gets ``b`` peers (the
        backup policy's current b by default).
        """
        ov = self.overlay
        ov.groups = {}
        for label, n in layout.items():
            iv = IntervalId.parse(label) if isinstance(label, str) else label
            ov.groups[iv] = []
            for _ in range(n):
                pid = self.new_id()
                peer = Peer(pid, ov)
                peer.interval = iv
                ov.peers[pid] = peer
                self.net.register(pid, peer)
                ov.groups[iv].append(pid)
                peer.active = True
        ov._topology_changed()
        for iv, group in ov.groups.items():
            ov._size_changed(iv)
            for pid in group:
                peer = ov.peers[pid]
                width = b or peer.policy.b
                rt = RoutingTable(iv)
                for level in range(1, iv.depth + 1):
                    target = flip(iv, level)
                    entry = LinkEntry(level, target, owner=iv.path < target.path)
                    cands = ov.candidates(target, k=width)
                    entry.peers = self.rng.sample(cands, min(width, len(cands)))
                    rt.entries[level] = entry
                mirror = mirror_of(iv)
                if mirror is not None and ov.node_exists(mirror):
                    cands = ov.candidates(mirror, k=width)
                    rt.cross_entry = LinkEntry(CROSS, mirror, owner=iv.path < mirror.path)
                    rt.cross_entry.peers = self.rng.sample(cands, min(width, len(cands)))
                peer.rt = rt
                if timers:
                    peer.start_timers()
        ov.check_invariants(after="populate")

    def put(self, iv: Union[str, IntervalId], n: int, tag: str = "d") -> List[int]:
        """Store ``n`` fresh keys of ``iv`` on every member; returns the keys."""
        iv = IntervalId.parse(iv) if isinstance(iv, str) else iv
        low, high = iv.bounds(self.cfg)
        keys = self.rng.sample(range(low, high), n)
        for k in keys:
            rec = Record(f"{tag}-{k}".encode(), 1, -1)
            for peer in self.members(iv):
                peer.store.merge(k, rec)
        return keys

    def grow(self, n: int, spacing: float = 0.05) -> None:
        """Join ``n`` peers through the join protocol, one every ``spacing`` seconds."""
        start = self.sim.now
        for i in range(n):
            self.sim.schedule(start + i * spacing, self.overlay.join, self.new_id())
        self.run(start + n * spacing + 5 * self.params.join_timeout)

    def run(self, until: float) -> None:
        self.metrics.running = True
        self.sim.run_until(until)
        self.metrics.running = False

    def run_for(self, dt: float) -> None:
        self.run(self.sim.now + dt)
