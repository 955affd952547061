"""
Independent brute-force checks for the core math: exact enumeration of the
masked-diffusion objective, direct-summation advantage tables, term-by-term
policy objective evaluation from stored probabilities, and the token-budget
SFT comparison bench. These deliberately avoid the production code paths
they certify; `run_oracle_battery` bundles them behind fixed seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .model import ModelParams, build_attention_mask, forward
from .rl.value import GaeConfig
from .sft import SftConfig


@dataclass
class OracleReport:
    name: str
    cases: int
    max_abs_err: float
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs_err <= self.tolerance


# -- exact masked-diffusion objective ------------------------------------


def oracle_elbo_enumeration(params: ModelParams, prompt, target,
                            cfg: SftConfig = SftConfig(),
                            quad_points: int = 64) -> float:
    """
    Exact expectation of the random-masking loss for one item: enumerate
    every non-empty mask subset, weight by P(subset | t) / (t |x0|), and
    integrate the mask rate over [low, high] with Gauss-Legendre quadrature.
    """
    mcfg = params.config
    prompt = np.asarray(prompt)
    x0 = np.asarray(target)
    if cfg.n_pad:
        x0 = np.concatenate([x0, np.full(cfg.n_pad, mcfg.pad_id, dtype=np.int64)])
    L = len(x0)
    if L > 8:
        raise ValueError("enumeration limited to targets of length <= 8")
    plen = len(prompt)
    attn = build_attention_mask(plen + L, mcfg.attention_mode, mcfg.block_size,
                                prompt_len=plen)
    subsets = range(1, 2 ** L)
    lattices = np.empty((2 ** L - 1, plen + L), dtype=np.int64)
    members = []
    for row, bits in enumerate(subsets):
        sub = [i for i in range(L) if bits >> i & 1]
        members.append(sub)
        lat = np.concatenate([prompt, x0])
        lat[plen + np.array(sub)] = mcfg.mask_id
        lattices[row] = lat
    with ad.no_grad():
        logits, _ = forward(params, lattices, attn)
        lsm = ad.log_softmax(logits).value
    # c[row] = (1/|x0|) sum over masked positions of -log p(x0_i)
    c = np.array([
        -lsm[row, plen + np.array(sub), x0[np.array(sub)]].sum() / L
        for row, sub in enumerate(members)
    ])
    k = np.array([len(sub) for sub in members])

    nodes, weights = np.polynomial.legendre.leggauss(quad_points)
    lo, hi = cfg.mask_low, cfg.mask_high
    t = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * weights / (hi - lo)     # uniform density over [lo, hi]
    # E = int dt/(hi-lo) sum_sub t^(|sub|-1) (1-t)^(L-|sub|) c(sub)
    total = 0.0
    for ti, wi in zip(t, w):
        total += wi * (ti ** (k - 1) * (1.0 - ti) ** (L - k) * c).sum()
    return float(total)


# -- direct-summation advantage tables -----------------------------------


def oracle_gae(rewards, values, cfg: GaeConfig):
    """
    Token returns and advantages by explicit double loops over the TD
    residuals; no recursion, no series rewriting.
    """
    T = len(rewards)
    g, l = cfg.gamma, cfg.lam
    r_s = [float(np.mean(rewards[t])) for t in range(T)]
    v_s = [float(np.mean(values[t])) for t in range(T)]

    def step_return(t):
        acc = 0.0
        for u in range(t, T):
            acc += g ** (u - t) * r_s[u]
        return acc

    def delta(t):
        nxt = v_s[t + 1] if t + 1 < T else 0.0
        return r_s[t] - v_s[t] + g * nxt

    def step_adv(t):
        acc = 0.0
        for u in range(t, T):
            acc += (g * l) ** (u - t) * delta(u)
        return acc

    returns, advs = [], []
    for t in range(T):
        nR = step_return(t + 1) if t + 1 < T else 0.0
        nA = step_adv(t + 1) if t + 1 < T else 0.0
        nV = v_s[t + 1] if t + 1 < T else 0.0
        R_t, A_t = [], []
        for j in range(len(rewards[t])):
            R_t.append(rewards[t][j] + g * nR)
            A_t.append((rewards[t][j] - values[t][j]) + g * nV + g * l * nA)
        returns.append(np.array(R_t))
        advs.append(np.array(A_t))
    return returns, advs


# -- term-by-term policy objective ---------------------------------------


def oracle_policy_objective(traces, clip_eps: float, kl_beta: float) -> float:
    """
    Evaluate the clipped trace objective from stored probabilities. Each
    trace is a list of steps; each step a list of (logp_new, logp_old, adv)
    triples. Returns the objective (to maximize), mean over traces.
    """
    total = 0.0
    for steps in traces:
        acc = 0.0
        for step in steps:
            n = len(step)
            for logp_new, logp_old, adv in step:
                r = np.exp(logp_new - logp_old)
                clipped = min(max(r, 1.0 - clip_eps), 1.0 + clip_eps)
                surr = min(r * adv, clipped * adv)
                rho = np.exp(logp_old - logp_new)
                kl = rho - 1.0 - np.log(rho)
                acc += (surr - kl_beta * kl) / n
        total += acc
    return total / len(traces)


def oracle_value_loss(v_new, v_old, returns, eps: float) -> float:
    """Straightforward re-implementation of the clipped value regression."""
    total = 0.0
    n = len(v_new)
    for j in range(n):
        vc = v_old[j] + min(max(v_new[j] - v_old[j], -eps), eps)
        total += max((v_new[j] - returns[j]) ** 2, (vc - returns[j]) ** 2)
    return 0.5 * total / n


# -- token-budget SFT bench ----------------------------------------------


def bench_token_efficiency(make_model, items, eval_tasks, budget: int,
                           seeds=(0, 1, 2), block: int = 4,
                           eval_sampler=None, lr: float = 1e-3,
                           trace_params=None):
    """
    Train each SFT variant to an equal tokens_forwarded budget from the
    same init and report eval accuracy per seed. `make_model(seed)` must
    return fresh ModelParams.
    """
    from .driver import SftRunConfig, train_sft, eval_accuracy
    from .decoder import SamplerConfig

    rows = []
    for seed in seeds:
        row = {"seed": seed}
        for objective in ("random", "semi_ar", "trace"):
            model = make_model(seed)
            cfg = SftRunConfig(objective=objective, steps=10 ** 9, seed=seed,
                               block=block, token_budget=budget, lr=lr)
            _, account, losses = train_sft(model, items, cfg,
                                           trace_params=trace_params)
            scfg = eval_sampler
            if scfg is None:
                scfg = SamplerConfig(strategy="static", k_per_step=1,
                                     block_size=block,
                                     max_new_tokens=model.config.max_len // 2)
            acc, _ = eval_accuracy(model, eval_tasks, scfg, seed=seed)
            row[objective] = acc
            row[objective + "_tokens"] = account.tokens_forwarded
            row[objective + "_loss"] = losses[-1]
        rows.append(row)
    return rows


# -- battery --------------------------------------------------------------

BATTERY_SEED = 20240817


def run_oracle_battery() -> list:
    """Fixed-seed cross-checks; each report pairs a production path with
    its oracle."""
    from .model import ModelConfig, init_params
    from .rl.value import gae_recursive, gae_closed_form, value_loss
    from .sft import loss_full_random

    rng = np.random.default_rng(BATTERY_SEED)
    reports = []

    # advantage tables: recursion vs closed form vs direct summation
    worst = 0.0
    cases = 0
    for _ in range(200):
        T = int(rng.integers(1, 12))
        sizes = rng.integers(1, 6, size=T)
        rewards = [rng.uniform(-1, 1, size=s) for s in sizes]
        values = [rng.uniform(-1, 1, size=s) for s in sizes]
        for g, l in ((1.0, 1.0), (1.0, 0.0), (0.99, 0.95), (0.9, 0.5)):
            cfg = GaeConfig(gamma=g, lam=l)
            rec = gae_recursive(rewards, values, cfg)
            clo = gae_closed_form(rewards, values, cfg)
            oR, oA = oracle_gae(rewards, values, cfg)
            for t in range(T):
                worst = max(worst,
                            np.abs(rec.returns[t] - oR[t]).max(),
                            np.abs(rec.advantages[t] - oA[t]).max(),
                            np.abs(clo.returns[t] - oR[t]).max(),
                            np.abs(clo.advantages[t] - oA[t]).max())
            cases += 1
    reports.append(OracleReport("gae_tables", cases, worst, worst, 1e-10))

    # value loss vs scalar re-implementation
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 10))
        v_new = rng.uniform(-1, 1, n)
        v_old = rng.uniform(-1, 1, n)
        ret = rng.uniform(-1, 1, n)
        got = value_loss(ad.Tensor(v_new), v_old, ret, 0.2).item()
        want = oracle_value_loss(v_new, v_old, ret, 0.2)
        worst = max(worst, abs(got - want))
    reports.append(OracleReport("value_loss", 100, worst, worst, 1e-12))

    # masked-diffusion loss: Monte Carlo mean vs exact enumeration
    mcfg = ModelConfig(vocab_size=11, d_model=16, n_layers=1, n_heads=2,
                       max_len=32)
    model = init_params(mcfg, seed=3)
    prompt = rng.integers(3, 11, size=4)
    target = rng.integers(3, 11, size=5)
    scfg = SftConfig()
    exact = oracle_elbo_enumeration(model, prompt, target, scfg)
    with ad.no_grad():
        vals = np.array([
            loss_full_random([(prompt, target)], model, scfg, seed)[0].item()
            for seed in range(2000)
        ])
    se = vals.std(ddof=1) / np.sqrt(len(vals))
    err = abs(vals.mean() - exact)
    reports.append(OracleReport("elbo_enumeration", len(vals), err, err, 2 * se))

    return reports
