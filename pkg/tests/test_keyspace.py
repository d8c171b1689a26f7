import hashlib
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from flucdht.keyspace import (
    ROOT,
    CannotSplitError,
    IntervalId,
    InvalidPairError,
    KeyspaceConfig,
    KeyspaceError,
    coalesce,
    contains,
    first_diff_level,
    flip,
    is_partition,
    key_of_datum,
    key_path,
    split,
)

L4 = KeyspaceConfig(4)
paths = st.text(alphabet="LR", max_size=8)


def iv(label):
    return IntervalId.parse(label)


# key_of_datum


def test_key_of_datum_deterministic():
    cfg = KeyspaceConfig(16)
    assert key_of_datum(b"hello", cfg) == key_of_datum(b"hello", cfg)


def test_key_of_datum_distinct():
    cfg = KeyspaceConfig(16)
    assert key_of_datum(b"a", cfg) != key_of_datum(b"b", cfg)


def test_key_of_datum_is_top_bits_of_sha1():
    cfg = KeyspaceConfig(16)
    raw = hashlib.sha1(b"some datum").digest()
    assert key_of_datum(b"some datum", cfg) == (raw[0] << 8) | raw[1]


def test_key_of_datum_rejects_empty():
    with pytest.raises(KeyspaceError):
        key_of_datum(b"", KeyspaceConfig(16))


def test_key_of_datum_uniform_chi_square():
    # 10^5 random data into 256 buckets (top 8 of 16 bits)
    cfg = KeyspaceConfig(16)
    rng = np.random.default_rng(3)
    data = rng.integers(0, 2**63, size=100_000)
    buckets = np.zeros(256, dtype=int)
    for x in data:
        buckets[key_of_datum(int(x).to_bytes(8, "big"), cfg) >> 8] += 1
    _, p = stats.chisquare(buckets)
    assert p > 0.001


# config and interval ids


@pytest.mark.parametrize("bad", [0, 65, -1])
def test_config_bounds(bad):
    with pytest.raises(KeyspaceError):
        KeyspaceConfig(bad)


def test_bounds_formula():
    cfg = KeyspaceConfig(8)
    assert iv("LR").bounds(cfg) == (64, 128)
    assert ROOT.bounds(cfg) == (0, 256)
    assert iv("RRRRRRRR").bounds(cfg) == (255, 256)


def test_label_roundtrip():
    for text in ("ll2", "r1", "root", "lrl3"):
        assert iv(text).label == text
    assert iv("LR") == iv("lr2")
    with pytest.raises(KeyspaceError):
        iv("ll3")


def test_depth_beyond_l_rejected():
    with pytest.raises(KeyspaceError):
        IntervalId("LLLLL").bounds(L4)


# split / coalesce


def test_split_root_l4():
    left, right = split(ROOT, L4)
    assert left.bounds(L4) == (0, 8)
    assert right.bounds(L4) == (8, 16)


def test_split_right_half_l4():
    rl, rr = split(iv("R"), L4)
    assert rl.bounds(L4) == (8, 12)
    assert rr.bounds(L4) == (12, 16)


def test_split_at_full_depth_fails():
    with pytest.raises(CannotSplitError):
        split(IntervalId("LRLR"), L4)


def test_coalesce_figure_labels():
    assert coalesce(iv("ll2"), iv("lr2")) == iv("l1")
    assert coalesce(iv("L"), iv("R")) == ROOT


@pytest.mark.parametrize("a,b", [("ll2", "rr2"), ("lr2", "ll2"), ("root", "l1"), ("ll2", "l1")])
def test_coalesce_invalid_pairs(a, b):
    with pytest.raises(InvalidPairError):
        coalesce(iv(a), iv(b))


@given(paths)
def test_split_then_coalesce_is_identity(path):
    cfg = KeyspaceConfig(16)
    node = IntervalId(path)
    left, right = split(node, cfg)
    assert coalesce(left, right) == node
    lo, hi = node.bounds(cfg)
    (a, b), (c, d) = left.bounds(cfg), right.bounds(cfg)
    assert (a, b, c, d) == (lo, (lo + hi) // 2, (lo + hi) // 2, hi)


# contains / first_diff_level


def test_contains_edges():
    assert contains(iv("R"), 8, L4)
    assert not contains(iv("L"), 8, L4)
    assert contains(ROOT, 15, L4)


def _enumerate_partitions(node, depth_left):
    yield [node]
    if depth_left == 0:
        return
    left, right = IntervalId(node.path + "L"), IntervalId(node.path + "R")
    for a in _enumerate_partitions(left, depth_left - 1):
        for b in _enumerate_partitions(right, depth_left - 1):
            yield a + b


def test_exhaustive_partitions_l6_each_key_in_one_leaf():
    cfg = KeyspaceConfig(6)
    # every partition down to depth 4, plus random deeper ones
    parts = list(_enumerate_partitions(ROOT, 4))
    assert len(parts) == 677
    rng = random.Random(0)
    for _ in range(200):
        leaves = [ROOT]
        for _ in range(rng.randrange(1, 20)):
            node = rng.choice([x for x in leaves if x.depth < 6])
            leaves.remove(node)
            leaves.extend(split(node, cfg))
        parts.append(leaves)
    for leaves in parts:
        assert is_partition(leaves, cfg)
        for k in range(64):
            assert sum(contains(x, k, cfg) for x in leaves) == 1


def test_first_diff_level_examples():
    cfg = KeyspaceConfig(8)
    assert first_diff_level(iv("ll2"), 0b10000000, cfg) == 1
    assert first_diff_level(iv("ll2"), 0b01000000, cfg) == 2
    assert first_diff_level(iv("ll2"), 0b00111111, cfg) is None
    assert first_diff_level(ROOT, 200, cfg) is None


def _smallest_containing_ancestor(node, key, cfg):
    for d in range(node.depth, -1, -1):
        anc = node.prefix(d)
        if contains(anc, key, cfg):
            return anc


@given(st.text(alphabet="LR", max_size=8), st.integers(0, 255))
def test_first_diff_level_matches_ancestor_scan(path, key):
    cfg = KeyspaceConfig(8)
    node = IntervalId(path)
    level = first_diff_level(node, key, cfg)
    anc = _smallest_containing_ancestor(node, key, cfg)
    if anc == node:
        assert level is None
    else:
        assert node.prefix(level - 1) == anc
    assert (level is None) == contains(node, key, cfg)


@given(st.integers(1, 64), st.data())
def test_contains_matches_bounds(l_bits, data):
    cfg = KeyspaceConfig(l_bits)
    path = data.draw(st.text(alphabet="LR", max_size=min(l_bits, 12)))
    key = data.draw(st.integers(0, cfg.size - 1))
    node = IntervalId(path)
    lo, hi = node.bounds(cfg)
    assert contains(node, key, cfg) == (lo <= key < hi)
    assert contains(node, key, cfg) == key_path(key, node.depth, cfg).startswith(path)


def test_flip():
    assert flip(iv("ll2"), 1) == iv("r1")
    assert flip(iv("ll2"), 2) == iv("lr2")
    with pytest.raises(KeyspaceError):
        flip(iv("ll2"), 3)


# partition invariant under random split/coalesce


@settings(max_examples=60)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 10**9)), max_size=120))
def test_partition_preserved_l32(ops):
    cfg = KeyspaceConfig(32)
    leaves = {ROOT}
    for do_split, pick in ops:
        ordered = sorted(leaves)
        node = ordered[pick % len(ordered)]
        if do_split and node.depth < cfg.l_bits:
            leaves.remove(node)
            leaves.update(split(node, cfg))
        elif not do_split and node.depth > 0 and node.sibling() in leaves:
            left, right = sorted((node, node.sibling()), key=lambda x: x.path)
            leaves -= {left, right}
            leaves.add(coalesce(left, right))
        assert is_partition(leaves, cfg)


def test_is_partition_detects_gap_and_overlap():
    assert not is_partition([iv("L")], L4)
    assert not is_partition([iv("L"), iv("LL"), iv("R")], L4)
