"""Trace algebra: shrinkage, prefixes, block slicing, re-blocking."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tracedlm.decoder import Trace
from tracedlm.trajectory import (BlockSlices, ShrunkenTrace, prefix, reblock,
                                 shrink, slice_blocks)


def make_trace(step_sizes, block_size=None):
    """Sequential trace; with block_size, positions are filled block by block."""
    steps = []
    pos = 0
    for s in step_sizes:
        steps.append(frozenset((pos + i, 3 + (pos + i) % 5) for i in range(s)))
        pos += s
    return Trace(0, tuple(steps), pos)


@st.composite
def block_traces(draw):
    """Traces shaped like block-mode decoding output."""
    block = draw(st.integers(1, 4))
    nblocks = draw(st.integers(1, 4))
    steps = []
    pos = 0
    for _ in range(nblocks):
        remaining = block
        while remaining:
            k = draw(st.integers(1, remaining))
            steps.append(frozenset((pos + i, 3) for i in range(k)))
            pos += k
            remaining -= k
    return Trace(0, tuple(steps), pos), block


def test_shrink_counts():
    tr = make_trace([1, 1, 1, 1, 1])
    assert shrink(tr, 2).num_steps == 3          # ceil(5/2)
    assert shrink(tr, 1).steps == tr.steps
    assert shrink(tr, 10).num_steps == 1
    with pytest.raises(ValueError):
        shrink(tr, 0)


def test_shrink_merges_neighbors():
    tr = make_trace([1, 2, 1])
    st_ = shrink(tr, 2)
    assert st_.steps[0] == tr.steps[0] | tr.steps[1]
    assert st_.steps[1] == tr.steps[2]


def test_shrink_block_aligned_restarts():
    # 1 step in block 0, then 4 steps in block 1: plain shrink with s=2 would
    # merge across the boundary; block-aligned restarts at each block
    steps = (frozenset({(0, 3)}), frozenset({(1, 3)}),
             frozenset({(2, 3)}), frozenset({(3, 3)}), frozenset({(4, 3)}))
    tr = Trace(0, steps, 5)
    st_ = shrink(tr, 2, block_size=2)
    blocks_per_step = [{p // 2 for p, _ in s} for s in st_.steps]
    assert all(len(b) == 1 for b in blocks_per_step)


def test_prefix():
    tr = make_trace([2, 1, 1])
    assert prefix(tr, 1) == frozenset()
    assert prefix(tr, 2) == tr.steps[0]
    assert prefix(tr, 4) == tr.steps[0] | tr.steps[1] | tr.steps[2]
    with pytest.raises(ValueError):
        prefix(tr, 5)
    with pytest.raises(ValueError):
        prefix(tr, 0)


def test_slice_blocks_transposition():
    # two blocks of size 2, each revealed in 2 steps of 1
    tr = make_trace([1, 1, 1, 1])
    bs = slice_blocks(tr, 2)
    assert len(bs.blocks) == 2 and bs.depth == 2
    # slice 0 holds step 0 of both blocks
    assert {(k, l) for k, l, _ in bs.slices[0]} == {(0, 0), (1, 0)}
    assert {(k, l) for k, l, _ in bs.slices[1]} == {(0, 1), (1, 1)}
    assert bs.in_block_prefix(1, 1) == tr.steps[2]


def test_slice_blocks_rejects_revisit():
    steps = (frozenset({(0, 3)}), frozenset({(2, 3)}), frozenset({(1, 3)}),
             frozenset({(3, 3)}))
    tr = Trace(0, steps, 4)
    with pytest.raises(ValueError):
        slice_blocks(tr, 2)


def test_slice_blocks_rejects_incomplete_block():
    steps = (frozenset({(0, 3), (2, 3)}), frozenset({(1, 3), (3, 3)}))
    tr = Trace(0, steps, 4)
    with pytest.raises(ValueError):
        slice_blocks(tr, 2)


@given(block_traces())
@settings(max_examples=200, deadline=None)
def test_slice_blocks_properties(tr_block):
    tr, block = tr_block
    for s in (1, 2, 3):
        st_ = shrink(tr, s, block_size=block)
        bs = slice_blocks(st_, block)
        # every step appears exactly once across slices
        pieces = [(k, l) for sl in bs.slices for k, l, _ in sl]
        assert len(pieces) == len(set(pieces)) == sum(
            len(b) for b in bs.blocks)
        # union of all pieces is the full trace
        got = set()
        for b in bs.blocks:
            for piece in b:
                got |= piece
        want = set()
        for step in tr.steps:
            want |= step
        assert got == want
        # slice depth bound: at most ceil(block / s) steps per block
        assert bs.depth <= -(-block // s)


def test_reblock_validates_and_preserves():
    tr = make_trace([2, 2, 2, 2])     # blocks of 2, 4 steps
    assert reblock(tr, 2, 4) is tr
    with pytest.raises(ValueError):
        reblock(tr, 2, 5)


def test_reblock_rejects_non_blockwise_trace():
    steps = (frozenset({(0, 3), (2, 3)}), frozenset({(1, 3), (3, 3)}))
    tr = Trace(0, steps, 4)
    with pytest.raises(ValueError):
        reblock(tr, 2, 4)
