"""
Supervised objectives for the toy diffusion transformer: fully random
masking, semi-autoregressive (block-conditioned), and trace replay on
collected inference traces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (ModelParams, build_attention_mask, conditional_token_logprob,
                    forward, two_stream_mask, two_stream_positions)
from .decoder import Trace


@dataclass
class SftConfig:
    mask_low: float = 0.1
    mask_high: float = 0.9
    n_pad: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_low <= self.mask_high <= 1.0:
            raise ValueError("mask-rate range must satisfy 0 <= low <= high <= 1")


@dataclass
class TokenAccount:
    tokens_forwarded: int = 0
    tokens_trained: int = 0

    def __add__(self, other):
        return TokenAccount(self.tokens_forwarded + other.tokens_forwarded,
                            self.tokens_trained + other.tokens_trained)


def _padded_target(target: np.ndarray, cfg: SftConfig, pad_id: int) -> np.ndarray:
    if cfg.n_pad:
        return np.concatenate([target, np.full(cfg.n_pad, pad_id, dtype=np.int64)])
    return target


def _draw_mask(rng, length: int, cfg: SftConfig):
    t = rng.uniform(cfg.mask_low, cfg.mask_high)
    return t, rng.random(length) < t


def loss_full_random(batch, params: ModelParams, cfg: SftConfig, seed: int):
    """
    Monte Carlo estimate of the masked-diffusion NLL objective: per item a
    mask rate t is drawn, tokens are masked independently, and the masked
    log-losses are weighted by 1/(t * |x0|). Items with no masked token
    contribute 0. Returns (scalar loss Tensor, TokenAccount).
    """
    if not batch:
        raise ValueError("empty batch")
    rng = np.random.default_rng(seed)
    mcfg = params.config
    draws = []
    for prompt, target in batch:
        x0 = _padded_target(np.asarray(target), cfg, mcfg.pad_id)
        t, mask = _draw_mask(rng, len(x0), cfg)
        draws.append((np.asarray(prompt), x0, t, mask))
    return _batched_masked_nll(draws, params, len(batch))


def _batched_masked_nll(draws, params: ModelParams, n_items: int):
    """One padded forward over items; each draw is (prompt, x0, t, mask)."""
    mcfg = params.config
    active = [(p, x, t, m) for p, x, t, m in draws if m.any()]
    account = TokenAccount()
    if not active:
        return Tensor(np.zeros(())), account
    lengths = [len(p) + len(x) for p, x, _, _ in active]
    L = max(lengths)
    n = len(active)
    tokens = np.full((n, L), mcfg.pad_id, dtype=np.int64)
    key_valid = np.zeros((n, L), dtype=bool)
    attn = np.ones((n, L, L), dtype=bool)
    gather = []  # (row, lattice_pos, token, weight)
    for i, (prompt, x0, t, mask) in enumerate(active):
        plen, xlen = len(prompt), len(x0)
        lat = np.concatenate([prompt, np.where(mask, mcfg.mask_id, x0)])
        tokens[i, : len(lat)] = lat
        key_valid[i, : len(lat)] = True
        attn[i, : len(lat), : len(lat)] = build_attention_mask(
            len(lat), mcfg.attention_mode, mcfg.block_size, prompt_len=plen)
        w = 1.0 / (t * xlen * n_items)
        for p in np.flatnonzero(mask):
            gather.append((i, plen + p, int(x0[p]), w))
        account.tokens_forwarded += plen + xlen
        account.tokens_trained += int(mask.sum())
    logits, _ = forward(params, tokens, attn, key_valid=key_valid)
    lsm = ad.log_softmax(logits)
    flat = ad.reshape(lsm, (n * L, mcfg.vocab_size))
    rows = np.array([i * L + p for i, p, _, _ in gather])
    toks = np.array([tok for _, _, tok, _ in gather])
    weights = np.array([-w for _, _, _, w in gather])
    picked = ad.gather_last(ad.take_rows(flat, rows), toks)
    return ad.dot_const(picked, weights), account


def loss_semi_ar(batch, params: ModelParams, block: int, cfg: SftConfig, seed: int):
    """
    Sum over response blocks of the random-masking loss conditioned on the
    clean earlier blocks. Full-attention models forward prefix+block per
    block; block-attention models use a single two-stream forward per item.
    Single-block items take the loss_full_random path draw-for-draw.
    """
    if block < 1:
        raise ValueError("block size must be >= 1")
    rng = np.random.default_rng(seed)
    mcfg = params.config
    if all(len(_padded_target(np.asarray(t), cfg, mcfg.pad_id)) <= block
           for _, t in batch):
        return loss_full_random(batch, params, cfg, seed)  # single block each
    terms = []
    account = TokenAccount()
    single_pass = mcfg.attention_mode == "block" and not mcfg.logit_shift
    n_items = len(batch)
    for prompt, target in batch:
        prompt = np.asarray(prompt)
        x0 = _padded_target(np.asarray(target), cfg, mcfg.pad_id)
        nblocks = (len(x0) + block - 1) // block
        if nblocks <= 1:
            t, mask = _draw_mask(rng, len(x0), cfg)
            term, acc = _batched_masked_nll([(prompt, x0, t, mask)], params, 1)
            terms.append(term)
            account = account + acc
            continue
        draws = []
        for b in range(nblocks):
            seg = x0[b * block: (b + 1) * block]
            t, mask = _draw_mask(rng, len(seg), cfg)
            draws.append((b, seg, t, mask))
        if single_pass:
            term, acc = _semi_ar_two_stream(prompt, x0, block, draws, params)
        else:
            term, acc = _semi_ar_blockwise(prompt, x0, block, draws, params)
        terms.append(term)
        account = account + acc
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / n_items), account


def _semi_ar_blockwise(prompt, x0, block, draws, params):
    """One forward per block over [prompt | clean prefix | noised block]."""
    mcfg = params.config
    plen = len(prompt)
    terms = []
    account = TokenAccount()
    for b, seg, t, mask in draws:
        if not mask.any():
            continue
        start = b * block
        lat = np.concatenate(
            [prompt, x0[:start], np.where(mask, mcfg.mask_id, seg)])
        attn = build_attention_mask(len(lat), mcfg.attention_mode,
                                    mcfg.block_size, prompt_len=plen)
        logits, _ = forward(params, lat[None, :], attn)
        lsm = ad.reshape(ad.log_softmax(logits), (len(lat), mcfg.vocab_size))
        idx = np.flatnonzero(mask)
        picked = ad.gather_last(ad.take_rows(lsm, plen + start + idx),
                                seg[idx])
        w = np.full(len(idx), -1.0 / (t * len(seg)))
        terms.append(ad.dot_const(picked, w))
        account.tokens_forwarded += len(lat)
        account.tokens_trained += len(idx)
    if not terms:
        return Tensor(np.zeros(())), account
    total = terms[0]
    for t_ in terms[1:]:
        total = ad.add(total, t_)
    return total, account


def _semi_ar_two_stream(prompt, x0, block, draws, params):
    """All blocks in one forward over [prompt | clean copy | noised copy]."""
    mcfg = params.config
    plen, L = len(prompt), len(x0)
    noised = x0.copy()
    gather = []
    account = TokenAccount(tokens_forwarded=plen + 2 * L)
    for b, seg, t, mask in draws:
        start = b * block
        for j in np.flatnonzero(mask):
            noised[start + j] = mcfg.mask_id
            gather.append((start + j, int(seg[j]), -1.0 / (t * len(seg))))
        account.tokens_trained += int(mask.sum())
    if not gather:
        return Tensor(np.zeros(())), account
    lat = np.concatenate([prompt, x0, noised])
    attn = two_stream_mask(plen, L, block)
    pos = two_stream_positions(plen, L)
    logits, _ = forward(params, lat[None, :], attn, positions=pos)
    lsm = ad.reshape(ad.log_softmax(logits), (len(lat), mcfg.vocab_size))
    rows = np.array([plen + L + p for p, _, _ in gather])
    picked = ad.gather_last(ad.take_rows(lsm, rows),
                            np.array([tok for _, tok, _ in gather]))
    return ad.dot_const(picked, np.array([w for _, _, w in gather])), account


def loss_trace_sft(records, params: ModelParams):
    """
    Mean over traces of the summed per-step mean NLL of each step's tokens
    conditioned on the trace prefix. records: (prompt_ids, Trace) pairs.
    """
    if not records:
        raise ValueError("no trace records")
    terms = []
    account = TokenAccount()
    for prompt, trace in records:
        trace.validate()
        revealed: dict[int, int] = {}
        for st in trace.steps:
            targets = sorted((p, tok) for p, tok in st if p not in trace.post_eos)
            if targets:
                lp = conditional_token_logprob(
                    params, prompt, revealed.items(), targets, trace.response_len)
                terms.append(ad.dot_const(lp, np.full(len(targets),
                                                      -1.0 / len(targets))))
                account.tokens_forwarded += len(prompt) + trace.response_len
                account.tokens_trained += len(targets)
            for p, tok in st:
                revealed[p] = tok
    if not terms:
        return Tensor(np.zeros(())), account
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(records)), account


def collect_traces(params: ModelParams, dataset, step_len: int) -> list:
    """
    Teacher-forced trace collection: repeatedly reveal the two
    highest-confidence reference tokens, then aggregate every step_len/2
    consecutive reveals into one trace step of step_len tokens.
    """
    if step_len < 2 or step_len % 2:
        raise ValueError("step length must be even and >= 2")
    mcfg = params.config
    out = []
    for prompt, target in dataset:
        prompt, target = np.asarray(prompt), np.asarray(target)
        plen, L = len(prompt), len(target)
        lattice = np.concatenate([prompt, np.full(L, mcfg.mask_id, dtype=np.int64)])
        attn = build_attention_mask(len(lattice), mcfg.attention_mode,
                                    mcfg.block_size, prompt_len=plen)
        masked = np.ones(L, dtype=bool)
        iterations = []
        with ad.no_grad():
            while masked.any():
                logits, _ = forward(params, lattice[None, :], attn)
                lsm = ad.log_softmax(logits).value[0]
                conf = np.exp(lsm[plen + np.arange(L), target])
                conf[~masked] = -1.0
                take = np.argsort(-conf, kind="stable")[: min(2, masked.sum())]
                iterations.append(frozenset((int(p), int(target[p])) for p in take))
                masked[take] = False
                lattice[plen + take] = target[take]
        group = step_len // 2
        steps = []
        for i in range(0, len(iterations), group):
            merged: set = set()
            for it in iterations[i: i + group]:
                merged |= it
            steps.append(frozenset(merged))
        trace = Trace(plen, tuple(steps), L)
        trace.validate()
        out.append((prompt, trace))
    return out
