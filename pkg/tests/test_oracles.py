"""Cross-checks between production paths and their brute-force oracles."""

import numpy as np
import pytest

from tracedlm import autodiff as ad
from tracedlm import tasks as toy
from tracedlm.decoder import SamplerConfig, generate
from tracedlm.model import ModelConfig, build_attention_mask, forward, init_params
from tracedlm.oracles import (bench_token_efficiency, oracle_elbo_enumeration,
                              oracle_policy_objective, run_oracle_battery)
from tracedlm.rl.policy import (PolicyConfig, TraceRollout,
                                policy_objective_tracerl, record_old_logprobs,
                                trace_step_logprobs)
from tracedlm.sft import SftConfig, loss_full_random
from tracedlm.trajectory import shrink


def model(**kw):
    base = dict(vocab_size=11, d_model=16, n_layers=1, n_heads=2, max_len=32)
    base.update(kw)
    return init_params(ModelConfig(**base), seed=0)


def test_battery_passes():
    reports = run_oracle_battery()
    assert {r.name for r in reports} == \
        {"gae_tables", "value_loss", "elbo_enumeration"}
    for r in reports:
        assert r.passed, r


def test_elbo_length_one_equals_plain_nll():
    # with a single target token the only subset is {0}; the expectation
    # collapses to the token's NLL regardless of the mask-rate interval
    m = model()
    prompt = np.array([3, 4, 5])
    target = np.array([7])
    got = oracle_elbo_enumeration(m, prompt, target)
    lat = np.concatenate([prompt, [m.config.mask_id]])
    with ad.no_grad():
        logits, _ = forward(m, lat[None], build_attention_mask(4, "full"))
    want = -ad.log_softmax(logits).value[0, 3, 7]
    assert np.isclose(got, want, atol=1e-12)


def test_elbo_matches_all_masked_loss_at_t_one():
    m = model()
    prompt = np.array([3, 4])
    target = np.array([6, 7, 8])
    cfg = SftConfig(mask_low=1.0, mask_high=1.0)
    # quadrature degenerates; compare against the deterministic t=1 loss
    exact = oracle_elbo_enumeration(m, prompt, target,
                                    SftConfig(mask_low=0.999999,
                                              mask_high=1.0))
    loss, _ = loss_full_random([(prompt, target)], m, cfg, seed=0)
    assert np.isclose(exact, loss.item(), atol=1e-4)


def test_elbo_rejects_long_targets():
    with pytest.raises(ValueError):
        oracle_elbo_enumeration(model(), np.array([3]), np.arange(3, 3 + 9))


def test_policy_objective_matches_oracle():
    m = model(attention_mode="block", block_size=2)
    prompt = np.array([3, 4, 5])
    rollouts = []
    for seed in range(3):
        res = generate(m, prompt, SamplerConfig(block_size=2,
                                                max_new_tokens=6, seed=seed))
        st = shrink(res.trace, 1, block_size=2)
        ro = TraceRollout(prompt, res.trace, st, 1.0,
                          advantage=0.4 * (seed - 1))
        record_old_logprobs(m, ro)
        rollouts.append(ro)
    # perturb parameters so the ratios move away from 1
    rng = np.random.default_rng(0)
    for _, t in m.items():
        t.value += 0.01 * rng.normal(size=t.value.shape)
    cfg = PolicyConfig(clip_eps=0.2, kl_beta=0.05)
    loss, _ = policy_objective_tracerl(rollouts, m, cfg)
    traces = []
    for ro in rollouts:
        with ad.no_grad():
            lps = trace_step_logprobs(m, ro.prompt_ids, ro.strace)
        steps = []
        for new, old in zip(lps, ro.old_logprobs):
            steps.append([(new.value[j], old[j], ro.advantage)
                          for j in range(len(old))])
        traces.append(steps)
    want = oracle_policy_objective(traces, cfg.clip_eps, cfg.kl_beta)
    assert np.isclose(-loss.item(), want, atol=1e-12)


def test_bench_token_efficiency_smoke():
    def make_model(seed):
        return init_params(ModelConfig(vocab_size=toy.VOCAB_SIZE, d_model=16,
                                       n_layers=1, n_heads=2, max_len=48),
                           seed=seed)

    items = toy.make_sft_items(4, difficulty=1, seed=0)
    tasks = [toy.gen_task(i, "addition", 1) for i in range(2)]
    rows = bench_token_efficiency(make_model, items, tasks, budget=60,
                                  seeds=(0,), block=2)
    assert len(rows) == 1
    row = rows[0]
    for objective in ("random", "semi_ar", "trace"):
        assert 0.0 <= row[objective] <= 1.0
        assert row[objective + "_tokens"] >= 60
