import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from provholder.errors import EmptyBatch
from provholder.merkle import Side, build_merkle, fold_path
from tests.helpers import digest
from tests.oracles import layout


def H(b: bytes) -> bytes:
    return hashlib.sha256(b).digest()


def test_single_leaf_is_root():
    root, paths = build_merkle([digest("L")])
    assert root == digest("L") and paths == [[]]


def test_two_leaves():
    L, R = digest("L"), digest("R")
    root, paths = build_merkle([L, R])
    assert root == H(L + R)
    assert paths == [[(R, Side.RIGHT)], [(L, Side.LEFT)]]


def test_three_leaves_duplicate_last():
    A, B, C = digest("A"), digest("B"), digest("C")
    root, _ = build_merkle([A, B, C])
    assert root == H(H(A + B) + H(C + C))


def test_empty():
    with pytest.raises(EmptyBatch):
        build_merkle([])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.binary(min_size=32, max_size=32), min_size=1, max_size=70))
def test_paths_fold_to_oracle_root(leaves):
    root, paths = build_merkle(leaves)
    assert root == layout.merkle_root(leaves)
    for leaf, path in zip(leaves, paths):
        assert fold_path(leaf, path) == root
