"""Clipped trace objective, baselines, and their invariances."""

import numpy as np
import pytest

from tracedlm import autodiff as ad
from tracedlm import tasks as toy
from tracedlm.decoder import SamplerConfig, Trace, generate
from tracedlm.model import ModelConfig, init_params
from tracedlm.rl.policy import (PolicyConfig, TraceRollout,
                                attach_mask_samples, clipped_term, kl_k3,
                                policy_objective_masked,
                                policy_objective_tracerl, record_old_logprobs,
                                standardize_rewards, trace_sliced_logprobs,
                                trace_step_logprobs)
from tracedlm.trajectory import shrink


def block_model(**kw):
    base = dict(vocab_size=11, d_model=16, n_layers=1, n_heads=2, max_len=48,
                attention_mode="block", block_size=2)
    base.update(kw)
    return init_params(ModelConfig(**base), seed=0)


def make_rollout(m, seed=0, reward=1.0, adv=0.5, shrink_s=1):
    prompt = np.array([3, 4, 5])
    res = generate(m, prompt, SamplerConfig(block_size=m.config.block_size,
                                            max_new_tokens=6, seed=seed))
    st = shrink(res.trace, shrink_s, block_size=m.config.block_size)
    ro = TraceRollout(prompt, res.trace, st, reward, advantage=adv)
    record_old_logprobs(m, ro)
    return ro


def test_standardize_rewards():
    assert np.allclose(standardize_rewards([1.0, 0.0]), [1.0, -1.0])
    assert np.allclose(standardize_rewards([1, 1, 0, 0]), [1, 1, -1, -1])
    assert standardize_rewards([0.5, 0.5, 0.5]) is None


def test_clipped_term_arithmetic():
    def c(r, a, eps=0.2):
        lp_new = ad.Tensor(np.array([np.log(r)]))
        return clipped_term(lp_new, np.array([0.0]), np.array([a]), eps).value[0]
    assert np.isclose(c(1.0, 1.0), 1.0)
    assert np.isclose(c(1.5, 1.0), 1.2)
    assert np.isclose(c(0.5, -1.0), -0.8)


def test_kl_k3_values():
    z = kl_k3(ad.Tensor(np.array([-1.0])), np.array([-1.0]))
    assert np.isclose(z.value[0], 0.0)
    # rho = 2
    v = kl_k3(ad.Tensor(np.array([-np.log(2.0)])), np.array([0.0]))
    assert np.isclose(v.value[0], 1.0 - np.log(2.0))
    rng = np.random.default_rng(0)
    new, old = rng.normal(size=50), rng.normal(size=50)
    assert (kl_k3(ad.Tensor(new), old).value >= 0).all()


def test_degenerate_single_token_objective():
    # one trace, one step, one token, ratio 1, A=1, beta=0 -> objective 1
    m = block_model()
    prompt = np.array([3, 4])
    tr = Trace(2, (frozenset({(0, 6)}),), 1)
    ro = TraceRollout(prompt, tr, shrink(tr, 1, block_size=2), 1.0, advantage=1.0)
    record_old_logprobs(m, ro)
    loss, diag = policy_objective_tracerl([ro], m, PolicyConfig(kl_beta=0.0))
    assert np.isclose(loss.item(), -1.0, atol=1e-12)
    assert diag["ratio_mean"] == 1.0


def test_missing_old_logprobs_rejected():
    m = block_model()
    prompt = np.array([3, 4])
    tr = Trace(2, (frozenset({(0, 6)}),), 1)
    ro = TraceRollout(prompt, tr, shrink(tr, 1, block_size=2), 1.0)
    with pytest.raises(ValueError):
        policy_objective_tracerl([ro], m, PolicyConfig())


def test_sliced_equals_step_path():
    m = block_model(value_head=True)
    prompt = np.array([3, 4, 5])
    for seed in range(5):
        res = generate(m, prompt, SamplerConfig(block_size=2,
                                                max_new_tokens=6, seed=seed))
        for s in (1, 2):
            st = shrink(res.trace, s, block_size=2)
            a = trace_step_logprobs(m, prompt, st)
            b = trace_sliced_logprobs(m, prompt, st)
            assert len(a) == len(b)
            for x, y in zip(a, b):
                assert np.allclose(x.value, y.value, atol=1e-12)
        av = trace_step_logprobs(m, prompt, st, return_values=True)[1]
        bv = trace_sliced_logprobs(m, prompt, st, return_values=True)[1]
        for x, y in zip(av, bv):
            assert np.allclose(x.value, y.value, atol=1e-12)


def test_objective_invariant_to_trace_order():
    m = block_model()
    ros = [make_rollout(m, seed=s, adv=0.3 * (s + 1)) for s in range(3)]
    cfg = PolicyConfig()
    a, _ = policy_objective_tracerl(ros, m, cfg)
    b, _ = policy_objective_tracerl(ros[::-1], m, cfg)
    assert np.isclose(a.item(), b.item(), atol=1e-12)


def test_first_epoch_gradient_is_plain_policy_gradient():
    # at theta = theta_old with beta=0, the clipped objective's gradient
    # equals that of sum_t mean_k A * log pi
    m = block_model()
    ro = make_rollout(m, seed=1, adv=0.7)
    cfg = PolicyConfig(kl_beta=0.0)
    m.zero_grad()
    loss, _ = policy_objective_tracerl([ro], m, cfg)
    loss.backward()
    g_clip = {k: t.grad.copy() for k, t in m.items() if t.grad is not None}
    m.zero_grad()
    lps = trace_step_logprobs(m, ro.prompt_ids, ro.strace)
    terms = [ad.dot_const(lp, np.full(len(lp.value), -ro.advantage / len(lp.value)))
             for lp in lps]
    ref = terms[0]
    for t in terms[1:]:
        ref = ad.add(ref, t)
    ref.backward()
    for k, g in g_clip.items():
        rel = np.abs(g - m[k].grad).max() / (np.abs(m[k].grad).max() + 1e-12)
        assert rel <= 1e-8, k


def test_old_logprobs_untouched_by_updates():
    m = block_model()
    ro = make_rollout(m, seed=2)
    before = [a.copy() for a in ro.old_logprobs]
    for _ in range(3):
        m.zero_grad()
        loss, _ = policy_objective_tracerl([ro], m, PolicyConfig())
        loss.backward()
        for _, t in m.items():
            if t.grad is not None:
                t.value -= 0.01 * t.grad
    for a, b in zip(before, ro.old_logprobs):
        assert np.array_equal(a, b)


def test_masked_baseline_and_coupled_coverage():
    m = block_model()
    ro = make_rollout(m, seed=3, adv=0.4)
    rng = np.random.default_rng(0)
    attach_mask_samples(m, ro, PolicyConfig(baseline_masks=2), rng, coupled=True)
    assert len(ro.mask_samples) == 4
    # each mask/complement pair covers every position exactly once
    for i in range(0, 4, 2):
        assert (ro.mask_samples[i] ^ ro.mask_samples[i + 1]).all()
    loss, diag = policy_objective_masked([ro], m, PolicyConfig(baseline_masks=2),
                                         coupled=True)
    assert np.isfinite(loss.item())
    assert diag["ratio_mean"] == pytest.approx(1.0)


def test_masked_baseline_ratio_one_at_start():
    m = block_model()
    ro = make_rollout(m, seed=4, adv=-0.2)
    attach_mask_samples(m, ro, PolicyConfig(), np.random.default_rng(1))
    loss, diag = policy_objective_masked([ro], m, PolicyConfig(kl_beta=0.0))
    # at ratio 1 the objective is exactly the advantage (weights sum to 1
    # per sample)
    assert np.isclose(loss.item(), 0.2, atol=1e-12)


def test_policy_config_validation():
    with pytest.raises(ValueError):
        PolicyConfig(clip_eps=0.0)
    with pytest.raises(ValueError):
        PolicyConfig(kl_beta=-1.0)
    with pytest.raises(ValueError):
        PolicyConfig(shrink=0)


def test_grad_check_policy_objectives():
    m = block_model(value_head=True)
    ro = make_rollout(m, seed=5, adv=0.6, shrink_s=2)
    cfg = PolicyConfig()
    err = ad.grad_check(
        lambda p: policy_objective_tracerl([ro], m, cfg)[0],
        dict(m.items()), max_coords=3)
    assert err <= 1e-4
    attach_mask_samples(m, ro, cfg, np.random.default_rng(2))
    err = ad.grad_check(
        lambda p: policy_objective_masked([ro], m, cfg)[0],
        dict(m.items()), max_coords=3)
    assert err <= 1e-4
