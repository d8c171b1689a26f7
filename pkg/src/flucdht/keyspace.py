"""Algebra of the l-bit key space.

Intervals are dyadic ranges named by their path from the root of the
interval tree, e.g. ``"LR"`` is the right half of the left half. Ranges are
half-open ``[low, high)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

__all__ = [
    "KeyspaceError",
    "CannotSplitError",
    "InvalidPairError",
    "KeyspaceConfig",
    "IntervalId",
    "ROOT",
    "key_of_datum",
    "split",
    "coalesce",
    "contains",
    "first_diff_level",
    "key_path",
    "flip",
    "is_partition",
]


class KeyspaceError(ValueError):
    pass


class CannotSplitError(KeyspaceError):
    pass


class InvalidPairError(KeyspaceError):
    pass


@dataclass(frozen=True)
class KeyspaceConfig:
    l_bits: int = 16
    digest: str = "sha1"

    def __post_init__(self):
        if not isinstance(self.l_bits, int) or not 1 <= self.l_bits <= 64:
            raise KeyspaceError(f"l_bits must be an integer in [1, 64], got {self.l_bits!r}")
        if self.digest not in hashlib.algorithms_available:
            raise KeyspaceError(f"unknown digest {self.digest!r}")

    @property
    def size(self) -> int:
        return 1 << self.l_bits

    def check_key(self, key: int) -> int:
        if not 0 <= key < self.size:
            raise KeyspaceError(f"key {key} outside [0, 2^{self.l_bits})")
        return key


@dataclass(frozen=True, order=True)
class IntervalId:
    """A node of the interval tree, identified by its L/R path."""

    path: str = ""

    def __post_init__(self):
        if self.path.strip("LR"):
            raise KeyspaceError(f"interval path must use only 'L' and 'R', got {self.path!r}")

    @property
    def depth(self) -> int:
        return len(self.path)

    @property
    def bits(self) -> int:
        """The path read as a binary number, L=0 and R=1, most significant first."""
        return int(self.path.replace("L", "0").replace("R", "1"), 2) if self.path else 0

    def bounds(self, cfg: KeyspaceConfig) -> Tuple[int, int]:
        if self.depth > cfg.l_bits:
            raise KeyspaceError(f"interval depth {self.depth} exceeds l_bits={cfg.l_bits}")
        width = 1 << (cfg.l_bits - self.depth)
        low = self.bits * width
        return low, low + width

    def parent(self) -> "IntervalId":
        if not self.path:
            raise KeyspaceError("root has no parent")
        return IntervalId(self.path[:-1])

    def sibling(self) -> "IntervalId":
        if not self.path:
            raise KeyspaceError("root has no sibling")
        return IntervalId(self.path[:-1] + ("R" if self.path[-1] == "L" else "L"))

    def prefix(self, depth: int) -> "IntervalId":
        return IntervalId(self.path[:depth])

    def is_ancestor_of(self, other: "IntervalId") -> bool:
        """True when ``other`` lies in this node's subtree (inclusive)."""
        return other.path.startswith(self.path)

    @property
    def label(self) -> str:
        # Figure-style names: "ll2", "r1"; the root is "root".
        return f"{self.path.lower()}{self.depth}" if self.path else "root"

    @classmethod
    def parse(cls, text: str) -> "IntervalId":
        """Accept a raw path (``"LR"``), a label (``"lr2"``) or ``"root"``."""
        text = text.strip()
        if text in ("", "root"):
            return ROOT
        if text[-1].isdigit():
            letters = text.rstrip("0123456789")
            if len(letters) != int(text[len(letters):]):
                raise KeyspaceError(f"label {text!r} has inconsistent depth")
            text = letters
        return cls(text.upper())

    def __str__(self) -> str:
        return self.label


ROOT = IntervalId("")


def key_of_datum(datum: bytes, cfg: KeyspaceConfig) -> int:
    """Top ``l_bits`` of the configured digest of ``datum``."""
    if not datum:
        raise KeyspaceError("cannot derive a key from an empty datum")
    digest = hashlib.new(cfg.digest, datum).digest()
    nbits = len(digest) * 8
    if cfg.l_bits > nbits:
        raise KeyspaceError(f"digest {cfg.digest} too short for l_bits={cfg.l_bits}")
    return int.from_bytes(digest, "big") >> (nbits - cfg.l_bits)


def split(iv: IntervalId, cfg: KeyspaceConfig) -> Tuple[IntervalId, IntervalId]:
    if iv.depth >= cfg.l_bits:
        raise CannotSplitError(f"{iv} is a single key at l_bits={cfg.l_bits}")
    return IntervalId(iv.path + "L"), IntervalId(iv.path + "R")


def coalesce(left: IntervalId, right: IntervalId) -> IntervalId:
    if (
        not left.path
        or not right.path
        or left.path[:-1] != right.path[:-1]
        or left.path[-1] != "L"
        or right.path[-1] != "R"
    ):
        raise InvalidPairError(f"{left} and {right} are not a left/right sibling pair")
    return left.parent()


def key_path(key: int, depth: int, cfg: KeyspaceConfig) -> str:
    """The first ``depth`` bits of ``key`` as an L/R path."""
    if depth == 0:
        return ""
    top = key >> (cfg.l_bits - depth)
    return format(top, f"0{depth}b").replace("0", "L").replace("1", "R")


def contains(iv: IntervalId, key: int, cfg: KeyspaceConfig) -> bool:
    if iv.depth == 0:
        return True
    return key >> (cfg.l_bits - iv.depth) == iv.bits


def first_diff_level(iv: IntervalId, key: int, cfg: KeyspaceConfig) -> Optional[int]:
    """1-based index of the first path position where ``key`` disagrees with ``iv``.

    ``None`` when the key is inside ``iv``. The smallest ancestor of ``iv``
    containing the key is ``iv.prefix(level - 1)``.
    """
    d = iv.depth
    if d == 0:
        return None
    diff = (key >> (cfg.l_bits - d)) ^ iv.bits
    if diff == 0:
        return None
    return d - diff.bit_length() + 1


def flip(iv: IntervalId, level: int) -> IntervalId:
    """Own path truncated to ``level`` with the bit at ``level`` inverted."""
    if not 1 <= level <= iv.depth:
        raise KeyspaceError(f"level {level} outside 1..{iv.depth}")
    bit = iv.path[level - 1]
    return IntervalId(iv.path[: level - 1] + ("R" if bit == "L" else "L"))


def is_partition(leaves: Iterable[IntervalId], cfg: KeyspaceConfig) -> bool:
    """True when the ranges of ``leaves`` are disjoint and cover the key space."""
    spans = sorted(iv.bounds(cfg) for iv in leaves)
    cursor = 0
    for low, high in spans:
        if low != cursor:
            return False
        cursor = high
    return cursor == cfg.size
