"""
Toy masked-diffusion transformer.

Supports full attention and block attention (bidirectional within a block,
causal across blocks), an optional logit right-shift for AR-adapted mode,
and an optional scalar value head on the shared trunk. The autodiff path
(`forward`) is used for every objective; a mirrored plain-numpy path
(`prompt_cache` / `window_forward`) backs iterative decoding with KV-cache.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, DTYPE, ShapeError

NEG_INF = -1e30

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 256
    attention_mode: str = "full"  # "full" | "block"
    block_size: int = 1
    logit_shift: bool = False
    value_head: bool = False
    mask_id: int = 1
    pad_id: int = 0
    eos_id: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.attention_mode not in ("full", "block"):
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")
        if self.mask_id >= self.vocab_size:
            raise ValueError("mask_id must be < vocab_size")


class ModelParams:
    """Named weight tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config, {k: ad.leaf(t.value.copy()) for k, t in self.tensors.items()}
        )

    def checksum(self) -> float:
        return float(sum(np.abs(t.value).sum() for t in self.tensors.values()))

    def save(self, path):
        arrays = {k: t.value for k, t in self.tensors.items()}
        meta = json.dumps({"version": CHECKPOINT_VERSION, "config": asdict(self.config)})
        np.savez(path, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)

    @staticmethod
    def load(path) -> "ModelParams":
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            cfg = ModelConfig(**meta["config"])
            ref = init_params(cfg, seed=0)
            tensors = {}
            for name, t in ref.items():
                if name not in data:
                    raise ValueError(f"checkpoint missing weight {name}")
                arr = data[name]
                if arr.shape != t.value.shape:
                    raise ValueError(
                        f"shape mismatch for {name}: {arr.shape} vs {t.value.shape}"
                    )
                tensors[name] = ad.leaf(arr.astype(DTYPE))
        return ModelParams(cfg, tensors)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    scale = 0.02

    def w(*shape):
        return ad.leaf(rng.normal(0.0, scale, size=shape))

    t = {
        "tok_emb": w(cfg.vocab_size, cfg.d_model),
        "pos_emb": w(cfg.max_len + 1, cfg.d_model),
        "bos_emb": w(cfg.d_model),
    }
    d, dff = cfg.d_model, 4 * cfg.d_model
    for i in range(cfg.n_layers):
        p = f"l{i}."
        t[p + "ln1_g"] = ad.leaf(np.ones(d))
        t[p + "ln1_b"] = ad.leaf(np.zeros(d))
        t[p + "wq"] = w(d, d)
        t[p + "wk"] = w(d, d)
        t[p + "wv"] = w(d, d)
        t[p + "wo"] = w(d, d)
        t[p + "ln2_g"] = ad.leaf(np.ones(d))
        t[p + "ln2_b"] = ad.leaf(np.zeros(d))
        t[p + "w1"] = w(d, dff)
        t[p + "b1"] = ad.leaf(np.zeros(dff))
        t[p + "w2"] = w(dff, d)
        t[p + "b2"] = ad.leaf(np.zeros(d))
    t["lnf_g"] = ad.leaf(np.ones(d))
    t["lnf_b"] = ad.leaf(np.zeros(d))
    t["out_w"] = w(d, cfg.vocab_size)
    t["out_b"] = ad.leaf(np.zeros(cfg.vocab_size))
    if cfg.value_head:
        # zero-init so value predictions start at 0
        t["value_w"] = ad.leaf(np.zeros((d, 1)))
        t["value_b"] = ad.leaf(np.zeros(1))
    return ModelParams(cfg, t)


# -- attention layouts ---------------------------------------------------


def build_attention_mask(length: int, mode: str, block_size: int = 1,
                         prompt_len: int = 0) -> np.ndarray:
    """
    Boolean [length, length]; entry (i, j) True iff i may attend to j.

    Full mode: all True. Block mode: bidirectional within a block, causal
    across blocks; the prompt (if any) forms its own leading block.
    """
    if mode == "full":
        return np.ones((length, length), dtype=bool)
    seg = np.empty(length, dtype=np.int64)
    seg[:prompt_len] = 0
    resp = np.arange(length - prompt_len)
    seg[prompt_len:] = 1 + resp // block_size
    return seg[None, :] <= seg[:, None]


def block_of(pos: int, block_size: int) -> int:
    """Block index of a response-relative position."""
    return pos // block_size


# -- autodiff forward ----------------------------------------------------


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    n, L, d = x.shape
    dh = d // n_heads
    return ad.transpose_12(ad.reshape(x, (n, L, n_heads, dh)))


def _merge_heads(x: Tensor) -> Tensor:
    n, h, L, dh = x.shape
    return ad.reshape(ad.transpose_12(x), (n, L, h * dh))


def _trunk(params: ModelParams, emb: Tensor, attn: np.ndarray,
           key_valid: np.ndarray | None) -> Tensor:
    cfg = params.config
    x = emb
    allowed = attn[:, None, :, :] if attn.ndim == 3 else attn[None, None, :, :]
    if key_valid is not None:
        allowed = allowed & key_valid[:, None, None, :]
    inv_sqrt = 1.0 / np.sqrt(cfg.d_model // cfg.n_heads)
    for i in range(cfg.n_layers):
        p = f"l{i}."
        h = ad.layer_norm(x, params[p + "ln1_g"], params[p + "ln1_b"])
        q = _split_heads(ad.matmul(h, params[p + "wq"]), cfg.n_heads)
        k = _split_heads(ad.matmul(h, params[p + "wk"]), cfg.n_heads)
        v = _split_heads(ad.matmul(h, params[p + "wv"]), cfg.n_heads)
        scores = ad.mul(ad.matmul(q, ad.transpose_last2(k)), inv_sqrt)
        scores = ad.add_where(scores, allowed, NEG_INF)
        ctx = ad.matmul(ad.softmax(scores), v)
        x = ad.add(x, ad.matmul(_merge_heads(ctx), params[p + "wo"]))
        h2 = ad.layer_norm(x, params[p + "ln2_g"], params[p + "ln2_b"])
        m = ad.gelu(ad.add(ad.matmul(h2, params[p + "w1"]), params[p + "b1"]))
        x = ad.add(x, ad.add(ad.matmul(m, params[p + "w2"]), params[p + "b2"]))
    return ad.layer_norm(x, params["lnf_g"], params["lnf_b"])


def forward(params: ModelParams, tokens: np.ndarray, attn: np.ndarray,
            positions: np.ndarray | None = None,
            key_valid: np.ndarray | None = None):
    """
    Per-position logits (and values, if the config has a value head).

    tokens: [N, L] int. attn: [L, L] bool over the lattice (pre-shift).
    positions: [L] position-embedding ids, default arange(L).
    key_valid: [N, L] bool, False for padding filler positions.

    With logit_shift on, a learned begin-of-sequence slot is prepended and
    the prediction for lattice position i is read from trunk output i-1.
    """
    cfg = params.config
    tokens = np.asarray(tokens)
    n, L = tokens.shape
    if tokens.size and tokens.max() >= cfg.vocab_size:
        raise ShapeError("token id out of range")
    positions = np.arange(L) if positions is None else np.asarray(positions)
    if positions.max() >= cfg.max_len:
        raise ShapeError("position beyond max_len")
    if attn.shape not in ((L, L), (n, L, L)):
        raise ShapeError(f"attention mask shape {attn.shape} vs lattice length {L}")

    emb = ad.add(ad.embedding(params["tok_emb"], tokens),
                 ad.embedding(params["pos_emb"], positions + 1))
    if cfg.logit_shift:
        bos_row = ad.reshape(params["bos_emb"], (1, cfg.d_model))
        bos = ad.reshape(ad.take_rows(bos_row, np.zeros(n, dtype=np.int64)),
                         (n, 1, cfg.d_model))
        emb = ad.concat([bos, emb], axis=1)
        if attn.ndim == 2:
            ext = np.zeros((L + 1, L + 1), dtype=bool)
            ext[1:, 1:] = attn
            ext[:, 0] = True
        else:
            ext = np.zeros((n, L + 1, L + 1), dtype=bool)
            ext[:, 1:, 1:] = attn
            ext[:, :, 0] = True
        attn = ext
        if key_valid is not None:
            key_valid = np.concatenate(
                [np.ones((n, 1), dtype=bool), key_valid], axis=1)

    h = _trunk(params, emb, attn, key_valid)
    if cfg.logit_shift:
        h = Tensor(h.value[:, :L], (h,),
                   lambda g: (np.concatenate([g, np.zeros((n, 1, cfg.d_model))], axis=1),))
    logits = ad.add(ad.matmul(h, params["out_w"]), params["out_b"])
    values = None
    if cfg.value_head:
        values = ad.reshape(
            ad.add(ad.matmul(h, params["value_w"]), params["value_b"]), (n, L))
    return logits, values


def conditional_token_logprob(params: ModelParams, prompt_ids: np.ndarray,
                              prefix, targets, response_len: int,
                              return_values: bool = False):
    """
    log p(token | prompt, revealed prefix) at each target position.

    prefix: iterable of (pos, token) pairs, response-relative positions.
    targets: iterable of (pos, token) pairs to score, disjoint from prefix.
    All other response positions are [MASK]. In block mode the lattice is
    truncated after the block containing the deepest target.
    """
    cfg = params.config
    prefix = list(prefix)
    targets = list(targets)
    ppos = {p for p, _ in prefix}
    tpos = [p for p, _ in targets]
    if set(tpos) & ppos:
        raise ValueError("targets overlap prefix")
    for p in tpos:
        if p < 0:
            raise ValueError("target position inside prompt")
        if p >= response_len:
            raise ValueError("target position beyond response")

    plen = len(prompt_ids)
    used = response_len
    if cfg.attention_mode == "block":
        deepest = max(block_of(p, cfg.block_size) for p in tpos)
        used = min(response_len, (deepest + 1) * cfg.block_size)
    lattice = np.concatenate(
        [np.asarray(prompt_ids), np.full(used, cfg.mask_id, dtype=np.int64)])
    for p, tok in prefix:
        if p < used:
            lattice[plen + p] = tok
    attn = build_attention_mask(plen + used, cfg.attention_mode,
                                cfg.block_size, prompt_len=plen)
    logits, values = forward(params, lattice[None, :], attn)
    lsm = ad.log_softmax(logits)
    flat = ad.reshape(lsm, (plen + used, cfg.vocab_size))
    rows = ad.take_rows(flat, np.array([plen + p for p, _ in targets]))
    out = ad.gather_last(rows, np.array([tok for _, tok in targets]))
    if return_values:
        vflat = ad.reshape(values, (plen + used,))
        vals = ad.take_rows(vflat, np.array([plen + p for p, _ in targets]))
        return out, vals
    return out


# -- inference path (plain numpy, KV-cache) ------------------------------


@dataclass
class KvCache:
    """Keys/values (and final hidden states) of the finalized lattice prefix."""
    length: int = 0
    k: list = field(default_factory=list)   # per layer [H, P, dh]
    v: list = field(default_factory=list)
    hidden: np.ndarray | None = None        # [P, d_model] final trunk output


def _np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    return xc * inv * g + b


def _np_gelu(x):
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def window_forward(params: ModelParams, cache: KvCache, tokens: np.ndarray,
                   positions: np.ndarray, is_bos: bool = False):
    """
    Forward a window that attends to the cached prefix plus itself
    (bidirectional within the window). Returns (logits, new_kv, hidden).

    With logit_shift, `is_bos=True` prepends the begin-of-sequence slot to
    the window (used once, when the prompt window starts the cache); logits
    are read right-shifted, pulling from cache.hidden across the boundary.
    """
    cfg = params.config
    W = len(tokens)
    x = params["tok_emb"].value[tokens] + params["pos_emb"].value[positions + 1]
    if is_bos:
        x = np.concatenate([params["bos_emb"].value[None, :], x], axis=0)
    nh, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    inv_sqrt = 1.0 / np.sqrt(dh)
    new_kv = []
    for i in range(cfg.n_layers):
        p = f"l{i}."
        h = _np_layer_norm(x, params[p + "ln1_g"].value, params[p + "ln1_b"].value)
        q = (h @ params[p + "wq"].value).reshape(-1, nh, dh).transpose(1, 0, 2)
        k = (h @ params[p + "wk"].value).reshape(-1, nh, dh).transpose(1, 0, 2)
        v = (h @ params[p + "wv"].value).reshape(-1, nh, dh).transpose(1, 0, 2)
        new_kv.append((k, v))
        if cache.length:
            k_all = np.concatenate([cache.k[i], k], axis=1)
            v_all = np.concatenate([cache.v[i], v], axis=1)
        else:
            k_all, v_all = k, v
        scores = q @ k_all.transpose(0, 2, 1) * inv_sqrt
        if is_bos:
            # the begin-of-sequence slot attends only itself (matches forward())
            scores[:, 0, 1:] = NEG_INF
        ctx = _np_softmax(scores) @ v_all
        ctx = ctx.transpose(1, 0, 2).reshape(-1, cfg.d_model)
        x = x + ctx @ params[p + "wo"].value
        h2 = _np_layer_norm(x, params[p + "ln2_g"].value, params[p + "ln2_b"].value)
        m = _np_gelu(h2 @ params[p + "w1"].value + params[p + "b1"].value)
        x = x + m @ params[p + "w2"].value + params[p + "b2"].value
    hidden = _np_layer_norm(x, params["lnf_g"].value, params["lnf_b"].value)
    if cfg.logit_shift:
        if is_bos:
            read = hidden[:W]       # slot i predicts window position i
            hidden = hidden         # includes the bos row for caching
        else:
            if cache.hidden is None:
                raise ValueError("shift mode needs cached hidden states")
            read = np.concatenate([cache.hidden[-1:], hidden[:-1]], axis=0)
    else:
        read = hidden
    logits = read @ params["out_w"].value + params["out_b"].value
    return logits, new_kv, hidden


def extend_cache(params: ModelParams, cache: KvCache, tokens: np.ndarray,
                 positions: np.ndarray) -> KvCache:
    """Finalize a window into the cache (recomputes K/V with final tokens)."""
    is_bos = params.config.logit_shift and cache.length == 0
    _, new_kv, hidden = window_forward(params, cache, tokens, positions, is_bos=is_bos)
    if not cache.length:
        k = [kv[0] for kv in new_kv]
        v = [kv[1] for kv in new_kv]
        h = hidden
    else:
        k = [np.concatenate([cache.k[i], new_kv[i][0]], axis=1)
             for i in range(len(new_kv))]
        v = [np.concatenate([cache.v[i], new_kv[i][1]], axis=1)
             for i in range(len(new_kv))]
        h = np.concatenate([cache.hidden, hidden], axis=0)
    return KvCache(length=k[0].shape[1], k=k, v=v, hidden=h)


def prompt_cache(params: ModelParams, prompt_ids: np.ndarray) -> KvCache:
    return extend_cache(params, KvCache(), np.asarray(prompt_ids),
                        np.arange(len(prompt_ids)))


# -- two-stream lattice (single-pass block training) ---------------------


def two_stream_mask(prompt_len: int, response_len: int, block_size: int) -> np.ndarray:
    """
    Attention mask for the lattice [prompt | context copy | working copy].

    The context copy holds the reference response under plain block
    attention. Working-copy positions in block k attend the prompt, the
    *context* copies of blocks < k, and their own working block
    (bidirectionally) — so every block conditions on a clean prefix in a
    single forward.
    """
    P, L, B = prompt_len, response_len, block_size
    n = P + 2 * L
    blk = np.arange(L) // B
    m = np.zeros((n, n), dtype=bool)
    m[:, :P] = True                                   # everyone sees the prompt
    m[:P, P:] = False                                 # prompt sees only itself
    ctx = slice(P, P + L)
    wrk = slice(P + L, P + 2 * L)
    m[ctx, ctx] = blk[None, :] <= blk[:, None]        # context: block causal
    m[wrk, ctx] = blk[None, :] < blk[:, None]         # working -> earlier clean blocks
    m[wrk, wrk] = blk[None, :] == blk[:, None]        # working block bidirectional
    return m


def two_stream_positions(prompt_len: int, response_len: int) -> np.ndarray:
    resp = np.arange(prompt_len, prompt_len + response_len)
    return np.concatenate([np.arange(prompt_len), resp, resp])
