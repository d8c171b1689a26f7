import itertools
import math
import random
from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flucdht.harness import Harness
from flucdht.keyspace import ROOT, IntervalId, InvalidPairError, KeyspaceConfig, contains, first_diff_level, flip
from flucdht.protocol import ProtocolParams
from flucdht.routing import (
    CROSS,
    BackupPolicy,
    LinkEntry,
    PeerRef,
    ProtocolViolationError,
    RouteExhaustedError,
    RoutingError,
    RoutingTable,
    assign_link_ownership,
    backup_size,
    estimate_qf,
    mirror_of,
    next_hop,
    repair_link,
    rt_on_coalesce,
    rt_on_split,
)

CFG8 = KeyspaceConfig(8)


def iv(label):
    return IntervalId.parse(label)


def refs(ids, at="root"):
    return [PeerRef(i, iv(at)) for i in ids]


def table(label, per_level):
    """RT at ``label`` whose level-d entry holds ``per_level[d]`` peer ids."""
    own = iv(label)
    rt = RoutingTable(own)
    for level in range(1, own.depth + 1):
        target = flip(own, level)
        rt.entries[level] = LinkEntry(level, target, refs(per_level[level], target.label))
    return rt


# backup_size


def test_backup_size_examples():
    assert backup_size(0.5, 0.125) == 3
    assert backup_size(0.1, 0.1) == 1
    assert backup_size(0.3, 0.09) == 2
    assert backup_size(0.9, 1e-6) == 8  # clamped to b_max


@pytest.mark.parametrize("q,eps", [(0.0, 0.1), (1.0, 0.1), (0.5, 0.0), (0.5, 1.0)])
def test_backup_size_rejects_degenerate(q, eps):
    with pytest.raises(ValueError):
        backup_size(q, eps)


probs = st.floats(0.001, 0.999)


@given(probs, probs)
def test_backup_size_is_smallest_sufficient(q, eps):
    b = backup_size(q, eps, b_max=10_000)
    assert q**b <= eps * (1 + 1e-9)
    assert b == 1 or q ** (b - 1) > eps * (1 - 1e-9)


@given(probs, probs, probs)
def test_backup_size_monotone(q1, q2, eps):
    lo, hi = sorted((q1, q2))
    assert backup_size(lo, eps) <= backup_size(hi, eps)
    assert backup_size(q1, min(eps, q2)) >= backup_size(q1, max(eps, q2))


# estimate_qf / BackupPolicy


def test_estimate_qf_prior_and_smoothing():
    assert estimate_qf([], 20) == 0.5
    assert estimate_qf([True] * 10 + [False] * 10, 20) == pytest.approx(11 / 22)
    assert estimate_qf([True] * 100 + [False] * 20, 20) == pytest.approx(1 / 22)


@given(st.lists(st.booleans(), max_size=60), st.integers(1, 40))
def test_estimate_qf_in_open_unit_interval(history, window):
    q = estimate_qf(history, window)
    assert 0.0 < q < 1.0


def test_estimate_qf_converges():
    rng = np.random.default_rng(11)
    history = list(rng.random(500) < 0.2)
    assert abs(estimate_qf(history, 500) - 0.2) <= 0.05


def test_policy_tracks_failures():
    policy = BackupPolicy(epsilon=0.01, window=20)
    for _ in range(20):
        policy.observe(False)
    assert policy.b == backup_size(1 / 22, 0.01)
    for _ in range(20):
        policy.observe(True)
    assert policy.b == 8
    assert policy.q_f_est == pytest.approx(21 / 22)
    assert policy.q_f_est**policy.b > policy.epsilon  # clamped, not sufficient


def test_policy_fixed_b_ignores_failures():
    policy = BackupPolicy(adaptive=False, b=3)
    for _ in range(30):
        policy.observe(True)
    assert policy.b == 3


@given(st.lists(st.booleans(), max_size=80))
def test_policy_invariant(events):
    policy = BackupPolicy(epsilon=0.05, window=10, b_max=64)
    for failed in events:
        policy.observe(failed)
        assert policy.q_f_est**policy.b <= policy.epsilon * (1 + 1e-9)


# ownership


def test_ownership_examples():
    assert assign_link_ownership(iv("ll2"), iv("rl2")) == iv("ll2")
    assert assign_link_ownership(iv("r1"), iv("l1")) == iv("l1")
    with pytest.raises(InvalidPairError):
        assign_link_ownership(iv("l1"), iv("l1"))


def test_ownership_symmetric_depth_le_3():
    nodes = [IntervalId("".join(p)) for d in range(4) for p in itertools.product("LR", repeat=d)]
    for a, b in itertools.permutations(nodes, 2):
        owner = assign_link_ownership(a, b)
        assert owner == assign_link_ownership(b, a)
        assert owner in (a, b)


# next_hop


def test_next_hop_level_selection():
    rt = table("ll2", {1: [10, 11], 2: [20]})
    key_in_r = 0b10000000
    key_in_lr = 0b01000000
    assert next_hop(rt, key_in_r, CFG8).peer_id == 10
    assert next_hop(rt, key_in_lr, CFG8).peer_id == 20


def test_next_hop_skips_dead_and_exhausts():
    rt = table("ll2", {1: [10, 11], 2: [20]})
    alive = {11}
    assert next_hop(rt, 0b10000000, CFG8, is_live=alive.__contains__).peer_id == 11
    with pytest.raises(RouteExhaustedError):
        next_hop(rt, 0b01000000, CFG8, is_live=alive.__contains__)
    with pytest.raises(RoutingError):
        next_hop(rt, 0b00000001, CFG8)


def test_next_hop_uses_cross_link_for_mirror_keys():
    rt = table("ll2", {1: [10], 2: [20]})
    rt.cross_entry = LinkEntry(CROSS, iv("rl2"), refs([30], "rl2"))
    assert next_hop(rt, 0b10000000, CFG8).peer_id == 30  # key in rl2
    assert next_hop(rt, 0b11000000, CFG8).peer_id == 10  # key in rr2
    assert next_hop(rt, 0b10000000, CFG8, exclude=[30]).peer_id == 10


def test_greedy_routes_against_graph_oracle():
    """Forwarding over populated RTs makes strict prefix progress and never beats BFS."""
    h = Harness(l_bits=8, seed=5)
    rng = random.Random(5)
    leaves = [ROOT]
    while len(leaves) < 24:
        node = rng.choice([x for x in leaves if x.depth < 8])
        leaves.remove(node)
        leaves += [IntervalId(node.path + "L"), IntervalId(node.path + "R")]
    h.populate({x: 2 for x in leaves}, b=2)
    ov = h.overlay
    # interval graph: leaf -> leaves reachable over one link
    graph = {x: set() for x in leaves}
    for x in leaves:
        for pid in ov.groups[x]:
            for e in h.peer(pid).rt.all_entries():
                graph[x].update(h.peer(r.peer_id).interval for r in e.peers)
    max_depth = max(x.depth for x in leaves)
    for src in leaves:
        dist = {src: 0}
        queue = deque([src])
        while queue:
            cur = queue.popleft()
            for nxt in graph[cur]:
                if nxt not in dist:
                    dist[nxt] = dist[cur] + 1
                    queue.append(nxt)
        for key in range(0, 256, 3):
            peer = h.members(src)[0]
            hops, progress = 0, []
            while not contains(peer.interval, key, CFG8):
                progress.append(first_diff_level(peer.interval, key, CFG8))
                peer = h.peer(next_hop(peer.rt, key, CFG8).peer_id)
                hops += 1
            assert progress == sorted(set(progress))  # strictly increasing
            assert hops <= max_depth
            assert hops >= dist[peer.interval]


# repair_link


def test_repair_replaces_dead_peer():
    rt = table("ll2", {1: [10, 11], 2: [20]})
    cands = refs([11, 12, 13, 14, 15], "r1")
    repair_link(rt, 1, cands, random.Random(0), b=2, is_live=lambda p: p != 10)
    entry = rt.entry(1)
    assert 10 not in entry.peer_ids()
    assert len(entry.peers) == 2 and len(set(entry.peer_ids())) == 2
    assert not entry.degraded


def test_repair_without_candidates_degrades():
    rt = table("ll2", {1: [10, 11], 2: [20]})
    repair_link(rt, 1, [], random.Random(0), b=2, is_live=lambda p: p != 10)
    assert rt.entry(1).peer_ids() == [11]
    assert rt.entry(1).degraded


def test_repair_is_seeded():
    picks = set()
    for _ in range(3):
        rt = table("ll2", {1: [], 2: [20]})
        repair_link(rt, 1, refs(range(100, 140), "r1"), random.Random(42), b=3)
        picks.add(tuple(rt.entry(1).peer_ids()))
    assert len(picks) == 1


# rt_on_split / rt_on_coalesce


def test_split_of_r1_matches_figure():
    # before t4: r1 links to l1; l1 has already split into ll2 and lr2
    rt = table("r1", {1: [1]})
    rt_on_split(rt, iv("rl2"), refs([7, 8], "rr2"), refs([2], "ll2"), b=2)
    assert rt.own_interval == iv("rl2")
    assert rt.entry(2).target_prefix == iv("rr2")
    assert rt.entry(2).peer_ids() == [7, 8]
    assert rt.cross_entry.target_prefix == iv("ll2")
    assert rt.cross_entry.peer_ids() == [2]
    rt.check()


def test_root_split_has_no_cross_link():
    rt = RoutingTable(ROOT)
    rt_on_split(rt, iv("l1"), refs([5], "r1"), refs([9]))
    assert rt.cross_entry is None
    assert list(rt.entries) == [1]


def test_split_without_other_half_is_violation():
    with pytest.raises(ProtocolViolationError):
        rt_on_split(RoutingTable(ROOT), iv("l1"), [])


def test_coalesce_truncates():
    rt = table("lr2", {1: [1], 2: [2]})
    rt.cross_entry = LinkEntry(CROSS, iv("rr2"), refs([3]))
    rt_on_coalesce(rt, iv("l1"))
    assert rt.own_interval == iv("l1") and list(rt.entries) == [1]
    assert rt.cross_entry is None
    with pytest.raises(ProtocolViolationError):
        rt_on_coalesce(rt, iv("r1"))


def test_figure_cross_links_after_populate():
    h = Harness(l_bits=8, seed=1)
    h.populate({"ll2": 4, "lr2": 4, "rl2": 4, "rr2": 4}, b=2)
    expect = {"ll2": "rl2", "lr2": "rr2", "rl2": "ll2", "rr2": "lr2"}
    for src, dst in expect.items():
        for peer in h.members(src):
            assert peer.rt.cross_entry.target_prefix == iv(dst)
            assert {h.peer(p).interval for p in peer.rt.cross_entry.peer_ids()} == {iv(dst)}
    assert mirror_of(iv("l1")) is None


def test_split_sequences_keep_one_entry_per_level():
    # small thresholds at l=4 force many splits; strict mode checks every RT
    params = ProtocolParams(g_s=4, g_c=2)
    for seed in range(4):
        h = Harness(l_bits=4, params=params, seed=seed)
        h.grow(40)
        for peer in h.overlay.active_peers():
            peer.rt.check()
        assert len(h.groups) > 4


def test_ownership_antisymmetric_in_overlay():
    h = Harness(l_bits=8, seed=2)
    h.populate({"ll2": 3, "lr2": 3, "r1": 3})
    for peer in h.overlay.active_peers():
        for entry in peer.rt.all_entries():
            for ref in entry.peers:
                other = h.peer(ref.peer_id)
                back = [e for e in other.rt.all_entries() if e.target_prefix.is_ancestor_of(peer.interval)]
                for e in back:
                    assert e.owner != entry.owner or e.target_prefix != peer.interval


def test_all_fail_frequency_small_sample():
    rng = np.random.default_rng(0)
    q, b, n = 0.3, 2, 20_000
    rt = table("l1", {1: list(range(b))})
    hits = 0
    for dead in rng.random((n, b)) < q:
        alive = {i for i in range(b) if not dead[i]}
        try:
            next_hop(rt, 200, CFG8, is_live=alive.__contains__)
        except RouteExhaustedError:
            hits += 1
    se = math.sqrt(q**b * (1 - q**b) / n)
    assert abs(hits / n - q**b) <= 3 * se
