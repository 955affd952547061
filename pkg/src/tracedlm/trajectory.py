"""
Pure algebra over decoding traces: shrinkage aggregation, prefix
extraction, block slicing for single-pass block-attention training, and
re-blocking for block-size enlargement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .decoder import Trace


@dataclass(frozen=True)
class ShrunkenTrace:
    """Trace with every s neighboring steps merged."""
    base: Trace
    s: int
    steps: tuple  # tuple of frozensets of (pos, token)

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def post_eos(self):
        return self.base.post_eos


def shrink(trace: Trace, s: int, block_size: int | None = None) -> ShrunkenTrace:
    """
    Merge every s neighboring steps. With block_size set, grouping restarts
    at each block boundary so merged steps never straddle rollout blocks
    (required before slice_blocks).
    """
    if s < 1:
        raise ValueError("shrinkage factor must be >= 1")
    groups: list[set] = []
    run = 0  # steps accumulated in the open group
    cur_block = -1
    for step in trace.steps:
        if block_size is not None:
            blocks = {p // block_size for p, _ in step}
            b = min(blocks)
            if b != cur_block:
                cur_block = b
                run = 0
        if run == 0:
            groups.append(set())
        groups[-1] |= step
        run = (run + 1) % s
    return ShrunkenTrace(trace, s, tuple(frozenset(g) for g in groups))


def prefix(steps, t: int) -> frozenset:
    """Tokens revealed before step t (1-indexed); t=1 gives the empty set."""
    if isinstance(steps, (Trace, ShrunkenTrace)):
        steps = steps.steps
    if not 1 <= t <= len(steps) + 1:
        raise ValueError(f"step index {t} out of range 1..{len(steps) + 1}")
    out: set = set()
    for s in steps[: t - 1]:
        out |= s
    return frozenset(out)


@dataclass(frozen=True)
class BlockSlices:
    """
    Per-block step lists and their transposition into slices.

    blocks[k] is the ordered list of step pieces falling in block k;
    slices[l] lists (block_index, local_step_index, piece) entries, one per
    block having more than l steps. Each (block, step) pair appears in
    exactly one slice.
    """
    block_size: int
    blocks: tuple          # tuple of tuples of frozensets
    slices: tuple          # tuple of tuples of (block_idx, local_idx, frozenset)

    @property
    def depth(self) -> int:
        return len(self.slices)

    def in_block_prefix(self, block_idx: int, local_idx: int) -> frozenset:
        """Tokens of this block revealed before its local step."""
        out: set = set()
        for piece in self.blocks[block_idx][:local_idx]:
            out |= piece
        return frozenset(out)


def slice_blocks(strace: ShrunkenTrace | Trace, block_size: int) -> BlockSlices:
    """
    Group a (shrunken) trace's steps by generation block and transpose into
    slices; slice l holds step l of every block that has one.
    """
    steps = strace.steps
    nblocks = 0
    if steps:
        nblocks = 1 + max(p // block_size for st in steps for p, _ in st)
    blocks: list[list] = [[] for _ in range(nblocks)]
    complete = [0] * nblocks
    sizes = [0] * nblocks
    for st in steps:
        for p, _ in st:
            sizes[p // block_size] += 1
    frontier = 0  # highest block touched so far
    for st in steps:
        touched = sorted({p // block_size for p, _ in st})
        if touched != list(range(touched[0], touched[-1] + 1)):
            raise ValueError("step spans non-adjacent blocks")
        if touched[0] < frontier and touched[-1] < frontier:
            raise ValueError("trace revisits an earlier block")
        for b in touched:
            piece = frozenset((p, tok) for p, tok in st if p // block_size == b)
            blocks[b].append(piece)
            complete[b] += len(piece)
        # every block before the deepest touched one must now be complete
        for b in range(touched[-1]):
            if complete[b] != sizes[b]:
                raise ValueError("block left incomplete while a later block started")
        frontier = touched[-1]
    depth = max((len(b) for b in blocks), default=0)
    slices = tuple(
        tuple((k, l, blocks[k][l]) for k in range(nblocks) if len(blocks[k]) > l)
        for l in range(depth)
    )
    return BlockSlices(block_size, tuple(tuple(b) for b in blocks), slices)


def reblock(trace: Trace, rollout_block: int, new_block: int) -> Trace:
    """
    Regroup a trace's positions under a larger block size. Steps are
    unchanged as sets; only the partition used by slice_blocks changes, so
    the trace itself is returned after validation.
    """
    if new_block % rollout_block:
        raise ValueError("new block size must be a multiple of the rollout block size")
    slice_blocks(trace, rollout_block)  # validates contiguity
    return trace
