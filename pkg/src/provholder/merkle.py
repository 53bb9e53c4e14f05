"""Binary SHA-256 Merkle trees with per-leaf audit paths.

Parents are ``SHA-256(left || right)``. A level with an odd number of nodes
duplicates its last node, and a single-leaf tree has the leaf as its root.
"""

from __future__ import annotations

import enum
import hashlib
from typing import Sequence

from .errors import EmptyBatch


class Side(enum.Enum):
    """Position of the sibling relative to the running hash."""

    LEFT = "left"
    RIGHT = "right"


AuditPath = list[tuple[bytes, Side]]


def _parent(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(left + right).digest()


def build_merkle(leaves: Sequence[bytes]) -> tuple[bytes, list[AuditPath]]:
    """Return the root and one audit path per leaf, in leaf order."""
    if not leaves:
        raise EmptyBatch("cannot build a Merkle tree without leaves")
    level = list(leaves)
    paths: list[AuditPath] = [[] for _ in level]
    positions = list(range(len(level)))
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        for leaf, pos in enumerate(positions):
            sib = pos ^ 1
            paths[leaf].append((level[sib], Side.LEFT if sib < pos else Side.RIGHT))
            positions[leaf] = pos // 2
        level = [_parent(level[i], level[i + 1]) for i in range(0, len(level), 2)]
    return level[0], paths


def fold_path(leaf: bytes, path: Sequence[tuple[bytes, Side]]) -> bytes:
    acc = leaf
    for sibling, side in path:
        acc = _parent(sibling, acc) if side is Side.LEFT else _parent(acc, sibling)
    return acc
