"""
Synthetic verifiable tasks: arithmetic prompts with boxed answers,
character-level vocabulary, reward computation, and accuracy-band task
filtering.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

# character-level vocabulary; specials first
PAD_ID, MASK_ID, EOS_ID = 0, 1, 2
_CHARS = "0123456789+-*%=?[] :ansrev"
_CHAR_TO_ID = {c: i + 3 for i, c in enumerate(_CHARS)}
_ID_TO_CHAR = {i + 3: c for i, c in enumerate(_CHARS)}
VOCAB_SIZE = 3 + len(_CHARS)

FAMILIES = ("addition", "modular-arithmetic", "sequence-transform", "series")


def encode(text: str) -> np.ndarray:
    try:
        return np.array([_CHAR_TO_ID[c] for c in text], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"character {e.args[0]!r} not in vocabulary") from None


def decode(ids) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == EOS_ID:
            break
        out.append(_ID_TO_CHAR.get(i, ""))
    return "".join(out)


@dataclass(frozen=True)
class Task:
    id: str
    prompt: str
    answer: str
    family: str


@dataclass(frozen=True)
class RewardSpec:
    kind: str = "binary"        # "binary" | "fraction"


def gen_task(seed: int, family: str = "addition", difficulty: int = 2) -> Task:
    """Deterministic synthetic task; the prompt asks for a bracketed answer."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    rng = np.random.default_rng((FAMILIES.index(family), difficulty, seed))
    lo, hi = 10 ** (difficulty - 1), 10 ** difficulty
    if family == "addition":
        a, b = int(rng.integers(lo, hi)), int(rng.integers(lo, hi))
        prompt, answer = f"{a}+{b}=? ans:", str(a + b)
    elif family == "modular-arithmetic":
        a, m = int(rng.integers(lo, hi)), int(rng.integers(2, 10))
        prompt, answer = f"{a}%{m}=? ans:", str(a % m)
    elif family == "sequence-transform":
        s = "".join(str(rng.integers(0, 10)) for _ in range(difficulty + 1))
        prompt, answer = f"rev {s}? ans:", s[::-1]
    else:
        # chained series: the next three terms of a_k = (a + k s) mod 10^d,
        # zero-padded and concatenated. Each term is one modular addition
        # away from its predecessor, so the answer's digits depend on the
        # generated prefix, not just the prompt.
        a, s = int(rng.integers(lo, hi)), int(rng.integers(lo, hi))
        terms = [(a + k * s) % hi for k in (1, 2, 3)]
        prompt = f"ser {a}+{s}? ans:"
        answer = "".join(f"{t:0{difficulty}d}" for t in terms)
    return Task(id=f"{family}-{difficulty}-{seed}", prompt=prompt,
                answer=answer, family=family)


def target_response(task: Task) -> str:
    """Canonical reference response: the answer inside the boxed marker."""
    return f"[{task.answer}]"


def canonical(s: str) -> str:
    s = s.strip().replace(" ", "")
    neg = s.startswith("-")
    s = s.lstrip("+-").lstrip("0")
    if not s:
        return "0"
    return ("-" if neg else "") + s


_BOX = re.compile(r"\[([^\[\]]*)\]")


def extract_boxed(text: str) -> str | None:
    """Contents of the last bracketed marker, or None."""
    hits = _BOX.findall(text)
    return hits[-1] if hits else None


def verify(response_text: str, task: Task, spec: RewardSpec = RewardSpec()) -> float:
    """Reward in [0, 1]; extraction failures score 0."""
    got = extract_boxed(response_text)
    truth = canonical(task.answer)
    if got is None:
        return 0.0
    got = canonical(got)
    if spec.kind == "binary":
        return 1.0 if got == truth else 0.0
    # fraction-of-tests: one per-character check against the ground truth
    checks = [i < len(got) and got[i] == truth[i] for i in range(len(truth))]
    return sum(checks) / len(checks)


def filter_tasks(tasks, params, sampler_cfg, group_size: int,
                 spec: RewardSpec = RewardSpec(), seed: int = 0):
    """Retain tasks whose estimated accuracy lies strictly inside (0.2, 0.8)."""
    from .decoder import generate, SamplerConfig  # local import, avoids cycle
    from dataclasses import replace

    if group_size < 4:
        raise ValueError("need at least 4 probes per task")
    kept = []
    for ti, task in enumerate(tasks):
        total = 0.0
        for g in range(group_size):
            cfg = replace(sampler_cfg,
                          seed=int(np.random.default_rng((seed, ti, g)).integers(2 ** 31)))
            res = generate(params, encode(task.prompt), cfg)
            total += verify(decode(res.text_tokens), task, spec)
        acc = total / group_size
        if 0.2 < acc < 0.8:
            kept.append(task)
    return kept


def make_sft_items(n: int, family: str = "addition", difficulty: int = 2,
                   seed: int = 0, include_eos: bool = True):
    """(prompt_ids, target_ids) pairs for supervised training."""
    items = []
    for i in range(n):
        task = gen_task(seed * 100003 + i, family, difficulty)
        target = encode(target_response(task))
        if include_eos:
            target = np.concatenate([target, [EOS_ID]])
        items.append((encode(task.prompt), target))
    return items
