"""Synthetic tasks: vocabulary, generation, rewards, filtering."""

import numpy as np
import pytest

from tracedlm import tasks as toy


def test_encode_decode_roundtrip():
    s = "12+34=? ans:[46]"
    assert toy.decode(toy.encode(s)) == s
    with pytest.raises(ValueError):
        toy.encode("hello!")


def test_decode_stops_at_eos():
    ids = np.concatenate([toy.encode("[7]"), [toy.EOS_ID], toy.encode("99")])
    assert toy.decode(ids) == "[7]"


def test_gen_task_deterministic_and_correct():
    a = toy.gen_task(5, "addition", 2)
    b = toy.gen_task(5, "addition", 2)
    assert a == b
    x, y = a.prompt.split("=")[0].split("+")
    assert str(int(x) + int(y)) == a.answer
    m = toy.gen_task(3, "modular-arithmetic", 2)
    v, mod = m.prompt.split("=")[0].split("%")
    assert str(int(v) % int(mod)) == m.answer
    r = toy.gen_task(3, "sequence-transform", 2)
    s = r.prompt.split()[1].rstrip("?")
    assert s[::-1] == r.answer
    with pytest.raises(ValueError):
        toy.gen_task(0, "division")


def test_canonical():
    assert toy.canonical("007") == "7"
    assert toy.canonical("-007") == "-7"
    assert toy.canonical(" 0 ") == "0"
    assert toy.canonical("") == "0"


def test_extract_boxed():
    assert toy.extract_boxed("x [1] y [23]") == "23"
    assert toy.extract_boxed("nothing") is None


def test_verify_binary_and_fraction():
    task = toy.gen_task(1, "addition", 2)
    assert toy.verify(f"[{task.answer}]", task) == 1.0
    assert toy.verify(f"[{int(task.answer) + 1}]", task) == 0.0
    assert toy.verify("no box", task) == 0.0
    spec = toy.RewardSpec(kind="fraction")
    full = toy.verify(f"[{task.answer}]", task, spec)
    assert full == 1.0
    # one wrong character scores a strict fraction
    wrong = "9" if task.answer[0] != "9" else "8"
    partial = toy.verify(f"[{wrong}{task.answer[1:]}]", task, spec)
    assert 0.0 <= partial < 1.0


def test_target_response_and_items():
    task = toy.gen_task(2, "addition", 2)
    assert toy.target_response(task) == f"[{task.answer}]"
    items = toy.make_sft_items(3, seed=0)
    assert len(items) == 3
    for prompt, target in items:
        assert target[-1] == toy.EOS_ID
        assert toy.decode(prompt).endswith("ans:")


def test_filter_tasks_band():
    from tracedlm.decoder import SamplerConfig
    from tracedlm.model import ModelConfig, init_params

    m = init_params(ModelConfig(vocab_size=toy.VOCAB_SIZE, d_model=16,
                                n_layers=1, n_heads=2, max_len=48), seed=0)
    tasks = [toy.gen_task(i, "addition", 1) for i in range(3)]
    cfg = SamplerConfig(max_new_tokens=6)
    kept = toy.filter_tasks(tasks, m, cfg, group_size=4)
    # untrained model scores ~0 accuracy; nothing lands in (0.2, 0.8)
    assert kept == []
    with pytest.raises(ValueError):
        toy.filter_tasks(tasks, m, cfg, group_size=2)
