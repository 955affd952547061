"""
Trace-conditioned clipped policy objectives.

The trace objective scores each token under the conditioning the sampler
actually saw: the prompt plus everything revealed before that token's
(shrunken) step. Per step the clipped surrogate is averaged over the
step's tokens, steps are summed, traces are averaged. Two baseline
objectives replace the trace conditioning with random masks of the final
response (plain and complement-coupled).

For block-attention models all steps are evaluated in a handful of
two-stream forwards (one per slice depth); the step-by-step path is kept
as the reference and for full attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..model import (ModelParams, conditional_token_logprob, forward,
                     two_stream_mask, two_stream_positions)
from ..trajectory import ShrunkenTrace, slice_blocks


@dataclass
class PolicyConfig:
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    shrink: int = 1
    epochs: int = 2
    baseline_masks: int = 2         # mask samples per trace (baselines)
    mask_low: float = 0.2
    mask_high: float = 0.8

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must be in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if self.shrink < 1 or self.epochs < 1 or self.baseline_masks < 1:
            raise ValueError("shrink, epochs and baseline_masks must be >= 1")


@dataclass
class TraceRollout:
    """One sampled response with everything needed for the update epochs."""
    prompt_ids: np.ndarray
    trace: object                       # decoder.Trace
    strace: ShrunkenTrace
    reward: float
    advantage: float = 0.0              # group-standardized scalar
    old_logprobs: list | None = None    # per valid step, float array
    token_advantages: list | None = None  # per valid step, float array (value model)
    mask_samples: list | None = None    # baselines: list of bool arrays
    mask_old_logprobs: list | None = None
    returns: list | None = None         # per valid step, token returns R_j
    v_old: list | None = None           # per valid step, frozen values V_j


def standardize_rewards(rewards) -> np.ndarray | None:
    """Center and scale by the population std; None if the group is flat."""
    r = np.asarray(rewards, dtype=float)
    std = r.std()
    if std < 1e-8:
        return None
    return (r - r.mean()) / std


# -- trace log-prob evaluators -------------------------------------------


def trace_step_logprobs(params: ModelParams, prompt_ids, strace,
                        return_values: bool = False):
    """
    One forward per (shrunken) step: log p of the step's tokens given the
    prompt and all earlier reveals. Returns a list with one Tensor per
    step that has tokens before EOS (and value Tensors when asked).
    """
    steps = strace.steps
    post_eos = strace.post_eos
    rl = strace.base.response_len if isinstance(strace, ShrunkenTrace) else strace.response_len
    lps, vals = [], []
    prefix: list = []
    for st in steps:
        targets = sorted((p, tok) for p, tok in st if p not in post_eos)
        if targets:
            out = conditional_token_logprob(params, prompt_ids, prefix, targets,
                                            rl, return_values=return_values)
            if return_values:
                lps.append(out[0])
                vals.append(out[1])
            else:
                lps.append(out)
        prefix.extend(sorted(st))
    if not lps:
        raise ValueError("trace has no tokens before EOS")
    return (lps, vals) if return_values else lps


def trace_sliced_logprobs(params: ModelParams, prompt_ids, strace: ShrunkenTrace,
                          return_values: bool = False):
    """
    Slice-parallel evaluation for block-attention models: one two-stream
    forward per slice depth scores the matching local step of every block
    at once. Step order and values match trace_step_logprobs.
    """
    cfg = params.config
    if cfg.attention_mode != "block" or cfg.logit_shift:
        raise ValueError("sliced evaluation needs block attention without logit shift")
    block = cfg.block_size
    bs = slice_blocks(strace, block)
    base = strace.base if isinstance(strace, ShrunkenTrace) else strace
    L = base.response_len
    post_eos = strace.post_eos
    clean = np.empty(L, dtype=np.int64)
    for p, tok in base.tokens().items():
        clean[p] = tok
    prompt_ids = np.asarray(prompt_ids)
    plen = len(prompt_ids)
    attn = two_stream_mask(plen, L, block)
    pos = two_stream_positions(plen, L)

    by_piece: dict = {}
    vals_by_piece: dict = {}
    for sl in bs.slices:
        working = np.full(L, cfg.mask_id, dtype=np.int64)
        piece_targets = []
        for k, local, piece in sl:
            for p, tok in bs.in_block_prefix(k, local):
                working[p] = tok
            targets = sorted((p, tok) for p, tok in piece if p not in post_eos)
            if targets:
                piece_targets.append((k, local, targets))
        if not piece_targets:
            continue
        lat = np.concatenate([prompt_ids, clean, working])
        logits, values = forward(params, lat[None, :], attn, positions=pos)
        lsm = ad.reshape(ad.log_softmax(logits), (len(lat), cfg.vocab_size))
        vflat = None
        if return_values:
            vflat = ad.reshape(values, (len(lat),))
        for k, local, targets in piece_targets:
            rows = np.array([plen + L + p for p, _ in targets])
            toks = np.array([tok for _, tok in targets])
            by_piece[(k, local)] = ad.gather_last(ad.take_rows(lsm, rows), toks)
            if return_values:
                vals_by_piece[(k, local)] = ad.take_rows(vflat, rows)

    lps, vals = [], []
    for k in range(len(bs.blocks)):
        for local in range(len(bs.blocks[k])):
            if (k, local) in by_piece:
                lps.append(by_piece[(k, local)])
                if return_values:
                    vals.append(vals_by_piece[(k, local)])
    if not lps:
        raise ValueError("trace has no tokens before EOS")
    return (lps, vals) if return_values else lps


def trace_logprobs(params: ModelParams, prompt_ids, strace,
                   return_values: bool = False, sliced: bool | None = None):
    """Dispatch to the sliced path when the model supports it."""
    cfg = params.config
    if sliced is None:
        sliced = cfg.attention_mode == "block" and not cfg.logit_shift
    fn = trace_sliced_logprobs if sliced else trace_step_logprobs
    return fn(params, prompt_ids, strace, return_values=return_values)


def record_old_logprobs(params: ModelParams, rollout: TraceRollout,
                        sliced: bool | None = None):
    """Snapshot per-step log-probs under the rollout policy (no grad)."""
    with ad.no_grad():
        lps = trace_logprobs(params, rollout.prompt_ids, rollout.strace,
                             sliced=sliced)
    rollout.old_logprobs = [lp.value.copy() for lp in lps]


# -- surrogate pieces -----------------------------------------------------


def clipped_term(logp_new: Tensor, logp_old: np.ndarray, adv: np.ndarray,
                 eps: float) -> Tensor:
    """Elementwise min(r A, clip(r, 1-eps, 1+eps) A), r = exp(new - old)."""
    ratio = ad.exp(ad.add(logp_new, -np.asarray(logp_old)))
    adv = np.asarray(adv, dtype=float)
    return ad.minimum(ad.mul(ratio, adv),
                      ad.mul(ad.clip(ratio, 1.0 - eps, 1.0 + eps), adv))


def kl_k3(logp_new: Tensor, logp_old: np.ndarray) -> Tensor:
    """Unbiased nonnegative estimate rho - 1 - ln rho, rho = exp(old - new)."""
    d = ad.add(logp_new, -np.asarray(logp_old))          # new - old
    return ad.add(ad.add(ad.exp(ad.mul(d, -1.0)), -1.0), d)


# -- objectives -----------------------------------------------------------


def policy_objective_tracerl(rollouts, params: ModelParams, cfg: PolicyConfig,
                             sliced: bool | None = None):
    """
    Trace-conditioned clipped objective, returned as a loss (negated) with
    diagnostics. Advantages come from token_advantages when present, else
    the rollout's scalar advantage.
    """
    if not rollouts:
        raise ValueError("no rollouts")
    terms = []
    ratio_sum = clipfrac_sum = kl_sum = 0.0
    n_tok = 0
    for ro in rollouts:
        if ro.old_logprobs is None:
            raise ValueError("rollout is missing old log-probs")
        lps = trace_logprobs(params, ro.prompt_ids, ro.strace, sliced=sliced)
        if len(lps) != len(ro.old_logprobs):
            raise ValueError("old log-probs do not match the trace steps")
        for t, lp in enumerate(lps):
            old = ro.old_logprobs[t]
            adv = (ro.token_advantages[t] if ro.token_advantages is not None
                   else np.full(len(old), ro.advantage))
            n = len(old)
            surr = clipped_term(lp, old, adv, cfg.clip_eps)
            kl = kl_k3(lp, old)
            term = ad.add(ad.dot_const(surr, np.full(n, 1.0 / n)),
                          ad.dot_const(kl, np.full(n, -cfg.kl_beta / n)))
            terms.append(term)
            r = np.exp(lp.value - old)
            ratio_sum += r.sum()
            clipfrac_sum += (np.abs(r - 1.0) > cfg.clip_eps).sum()
            kl_sum += kl.value.sum()
            n_tok += n
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    loss = ad.mul(total, -1.0 / len(rollouts))
    diag = {"ratio_mean": ratio_sum / n_tok, "clip_frac": clipfrac_sum / n_tok,
            "kl_mean": kl_sum / n_tok, "tokens": n_tok}
    return loss, diag


def sample_masks(rng: np.random.Generator, length: int, m: int,
                 low: float, high: float):
    """m random masks over the response, each with at least one position."""
    out = []
    for _ in range(m):
        t = rng.uniform(low, high)
        mask = rng.random(length) < t
        if not mask.any():
            mask[rng.integers(length)] = True
        if mask.all() and length > 1:
            mask[rng.integers(length)] = False
        out.append(mask)
    return out


def attach_mask_samples(params: ModelParams, rollout: TraceRollout,
                        cfg: PolicyConfig, rng: np.random.Generator,
                        coupled: bool = False):
    """Draw the baseline's masks and snapshot old log-probs under them."""
    L = rollout.trace.response_len
    masks = sample_masks(rng, L, cfg.baseline_masks, cfg.mask_low, cfg.mask_high)
    if coupled:
        masks = [m for mk in masks for m in (mk, ~mk)]
    rollout.mask_samples = masks
    old = []
    with ad.no_grad():
        for mask in masks:
            lp = _masked_logprobs(params, rollout, mask)
            old.append(lp.value.copy() if lp is not None else None)
    rollout.mask_old_logprobs = old


def _masked_logprobs(params: ModelParams, ro: TraceRollout, mask: np.ndarray):
    """log p of the masked final-response tokens given the unmasked rest."""
    tokens = ro.trace.tokens()
    L = ro.trace.response_len
    prefix = [(p, tokens[p]) for p in range(L) if not mask[p]]
    targets = [(p, tokens[p]) for p in np.flatnonzero(mask)
               if p not in ro.trace.post_eos]
    if not targets:
        return None
    return conditional_token_logprob(params, ro.prompt_ids, prefix, targets, L)


def policy_objective_masked(rollouts, params: ModelParams, cfg: PolicyConfig,
                            coupled: bool = False):
    """
    Random-masking baseline: the clipped surrogate over masked final-answer
    tokens, averaged per mask sample (1/|masked| weights), mean over
    samples and traces. The coupled variant pairs each mask with its
    complement and normalizes the pair by the full response length.
    """
    if not rollouts:
        raise ValueError("no rollouts")
    terms = []
    ratio_sum = kl_sum = 0.0
    n_tok = 0
    for ro in rollouts:
        if ro.mask_samples is None or ro.mask_old_logprobs is None:
            raise ValueError("rollout is missing mask samples")
        n_groups = (len(ro.mask_samples) // 2 if coupled else len(ro.mask_samples))
        for i, mask in enumerate(ro.mask_samples):
            old = ro.mask_old_logprobs[i]
            if old is None:
                continue
            lp = _masked_logprobs(params, ro, mask)
            n = len(old)
            denom = ro.trace.response_len if coupled else n
            adv = np.full(n, ro.advantage)
            surr = clipped_term(lp, old, adv, cfg.clip_eps)
            kl = kl_k3(lp, old)
            scale = 1.0 / (denom * n_groups)
            terms.append(ad.add(ad.dot_const(surr, np.full(n, scale)),
                                ad.dot_const(kl, np.full(n, -cfg.kl_beta * scale))))
            ratio_sum += np.exp(lp.value - old).sum()
            kl_sum += kl.value.sum()
            n_tok += n
    if not terms:
        raise ValueError("no scorable masked tokens")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    loss = ad.mul(total, -1.0 / len(rollouts))
    diag = {"ratio_mean": ratio_sum / n_tok, "kl_mean": kl_sum / n_tok,
            "tokens": n_tok}
    return loss, diag


def policy_objective_random_masking(rollouts, params, cfg):
    return policy_objective_masked(rollouts, params, cfg, coupled=False)


def policy_objective_coupled(rollouts, params, cfg):
    return policy_objective_masked(rollouts, params, cfg, coupled=True)
