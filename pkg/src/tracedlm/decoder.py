"""
Iterative parallel decoding with static / dynamic confidence unmasking.

Generation proceeds block by block. Within the active block, a forward
pass scores the masked positions, a set of positions is revealed, and the
loop repeats until the block is complete; the block is then finalized into
the KV-cache. The full decoding trace (which positions were revealed at
which step) is recorded. The uncached mode rebuilds the prefix with the
identical per-block computations each pass, so cached and uncached runs
are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, KvCache, prompt_cache, extend_cache, window_forward


class GenerationError(RuntimeError):
    """Non-finite logits encountered while decoding."""


@dataclass
class SamplerConfig:
    strategy: str = "dynamic"          # "static" | "dynamic"
    k_per_step: int = 1                # static: tokens revealed per step
    threshold: float = 0.9             # dynamic: confidence threshold
    temperature: float = 1.0
    top_k: int = 0                     # 0 = full distribution, 1 = greedy
    block_size: int = 4
    max_new_tokens: int = 16
    further_horizon: int = 0           # extra masked context (full-attention mode)
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("static", "dynamic"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "dynamic" and not 0.0 < self.threshold < 1.0:
            raise ValueError("dynamic threshold must be in (0, 1)")
        if self.k_per_step < 1:
            raise ValueError("k_per_step must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class Trace:
    """Ordered decoding steps; each step is a set of (position, token)."""
    prompt_len: int
    steps: tuple            # tuple of frozensets of (pos, token), pos response-relative
    response_len: int
    post_eos: frozenset = frozenset()   # positions revealed after the EOS token

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def tokens(self) -> dict:
        return {p: tok for st in self.steps for p, tok in st}

    def validate(self):
        seen: set = set()
        for st in self.steps:
            pos = {p for p, _ in st}
            if pos & seen:
                raise ValueError("trace steps are not disjoint")
            seen |= pos
        if seen != set(range(self.response_len)):
            raise ValueError("trace steps do not partition the response")
        if not self.steps:
            raise ValueError("trace must have at least one step")


def confidence(logits: np.ndarray, temperature: float, top_k: int,
               rng: np.random.Generator):
    """
    Per-position confidence and sampled token for masked positions.

    Confidence is the max probability of the temperature-scaled softmax.
    Tokens are drawn from the top-k truncated, renormalized distribution
    (argmax when top_k == 1).
    """
    p = np.exp(logits / temperature - (logits / temperature).max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    conf = p.max(axis=-1)
    if top_k == 1:
        tokens = p.argmax(axis=-1)
    else:
        q = p
        if top_k > 1:
            kth = np.sort(p, axis=-1)[:, -top_k][:, None]
            q = np.where(p >= kth, p, 0.0)
            q = q / q.sum(axis=-1, keepdims=True)
        u = rng.random(q.shape[0])
        cdf = q.cumsum(axis=-1)
        tokens = (u[:, None] > cdf).sum(axis=-1)
        tokens = np.minimum(tokens, q.shape[1] - 1)
    return conf, tokens


def select_unmask_set(confidences: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """Indices (into the confidence array) to reveal this step."""
    if confidences.size == 0:
        raise ValueError("no masked positions in scope")
    if cfg.strategy == "static":
        k = min(cfg.k_per_step, confidences.size)
        return np.sort(np.argsort(-confidences, kind="stable")[:k])
    over = np.flatnonzero(confidences > cfg.threshold)
    if over.size == 0:
        return np.array([int(confidences.argmax())])  # forced progress
    return over


@dataclass
class GenerationResult:
    trace: Trace
    tokens: np.ndarray       # revealed response tokens, in position order
    num_steps: int
    text_tokens: np.ndarray  # tokens up to (excluding) EOS


def generate(params: ModelParams, prompt_ids: np.ndarray, cfg: SamplerConfig,
             use_cache: bool = True) -> GenerationResult:
    mcfg = params.config
    prompt_ids = np.asarray(prompt_ids)
    plen = len(prompt_ids)
    if plen + cfg.max_new_tokens > mcfg.max_len:
        raise ValueError("prompt plus max_new_tokens exceeds max_len")
    rng = np.random.default_rng(cfg.seed)

    finalized: list[np.ndarray] = []   # per completed block, final tokens
    steps: list[frozenset] = []
    eos_seen = False

    def build_cache() -> KvCache:
        cache = prompt_cache(params, prompt_ids)
        start = 0
        for blk in finalized:
            cache = extend_cache(params, cache, blk,
                                 np.arange(plen + start, plen + start + len(blk)))
            start += len(blk)
        return cache

    cache = build_cache() if use_cache else None
    block_start = 0
    while block_start < cfg.max_new_tokens and not eos_seen:
        bsize = min(cfg.block_size, cfg.max_new_tokens - block_start)
        block = np.full(bsize, mcfg.mask_id, dtype=np.int64)
        masked = np.ones(bsize, dtype=bool)
        while masked.any():
            horizon = 0
            if mcfg.attention_mode == "full":
                horizon = min(cfg.further_horizon,
                              cfg.max_new_tokens - block_start - bsize)
            window = np.concatenate(
                [block, np.full(horizon, mcfg.mask_id, dtype=np.int64)])
            pos = np.arange(plen + block_start, plen + block_start + len(window))
            pre = cache if use_cache else build_cache()
            logits, _, _ = window_forward(params, pre, window, pos)
            block_logits = logits[:bsize][masked]
            if not np.all(np.isfinite(block_logits)):
                raise GenerationError(
                    f"non-finite logits at block starting {block_start}")
            conf, toks = confidence(block_logits, cfg.temperature, cfg.top_k, rng)
            sel = select_unmask_set(conf, cfg)
            mpos = np.flatnonzero(masked)
            reveal = mpos[sel]
            block[reveal] = toks[sel]
            masked[reveal] = False
            steps.append(frozenset(
                (int(block_start + p), int(block[p])) for p in reveal))
        finalized.append(block)
        if use_cache:
            cache = extend_cache(params, cache, block,
                                 np.arange(plen + block_start,
                                           plen + block_start + bsize))
        if mcfg.eos_id in block:
            eos_seen = True
        block_start += bsize

    tokens = np.concatenate(finalized) if finalized else np.empty(0, dtype=np.int64)
    response_len = len(tokens)
    post_eos = frozenset()
    eos_pos = np.flatnonzero(tokens == mcfg.eos_id)
    if eos_pos.size:
        post_eos = frozenset(range(int(eos_pos[0]) + 1, response_len))
        text_tokens = tokens[: int(eos_pos[0])]
    else:
        text_tokens = tokens
    trace = Trace(plen, tuple(steps), response_len, post_eos)
    trace.validate()
    return GenerationResult(trace, tokens, len(steps), text_tokens)


def acceleration_ratio(trace: Trace) -> float:
    """Response tokens divided by decoding steps (>= 1)."""
    if trace.num_steps < 1:
        raise ValueError("trace has no steps")
    return trace.response_len / trace.num_steps


# -- trace dump format (line-delimited JSON) -----------------------------


@dataclass
class TraceRecord:
    task_id: str
    prompt_text: str
    trace: Trace
    reward: float
    seed: int
    old_logprobs: tuple | None = None   # per step, tuple of floats (position-sorted)


def _trace_to_json(rec: TraceRecord) -> dict:
    d = {
        "task_id": rec.task_id,
        "prompt": rec.prompt_text,
        "prompt_len": rec.trace.prompt_len,
        "response_len": rec.trace.response_len,
        "steps": [sorted([int(p), int(t)] for p, t in st) for st in rec.trace.steps],
        "post_eos": sorted(rec.trace.post_eos),
        "reward": rec.reward,
        "seed": rec.seed,
    }
    if rec.old_logprobs is not None:
        d["old_logprobs"] = [list(s) for s in rec.old_logprobs]
    return d


def _trace_from_json(d: dict) -> TraceRecord:
    trace = Trace(
        prompt_len=d["prompt_len"],
        steps=tuple(frozenset((p, t) for p, t in st) for st in d["steps"]),
        response_len=d["response_len"],
        post_eos=frozenset(d["post_eos"]),
    )
    old = d.get("old_logprobs")
    return TraceRecord(
        task_id=d["task_id"], prompt_text=d["prompt"], trace=trace,
        reward=d["reward"], seed=d["seed"],
        old_logprobs=tuple(tuple(s) for s in old) if old is not None else None,
    )


def dump_traces(records, path):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(_trace_to_json(rec)) + "\n")


def load_traces(path) -> list[TraceRecord]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(_trace_from_json(json.loads(line)))
    return out
