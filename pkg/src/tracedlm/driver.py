"""
Training orchestration: grouped rollouts with frozen old-policy log-probs,
advantage construction (group-standardized or value-model GAE), clipped
policy epochs with interleaved value regression, metrics/event logging,
and the block-enlargement schedule. Also the supervised training loop and
greedy accuracy evaluation used by the experiment scripts.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import autodiff as ad
from . import tasks as toy
from .decoder import SamplerConfig, generate, acceleration_ratio
from .model import ModelParams
from .optim import Adam
from .rl.policy import (PolicyConfig, TraceRollout, attach_mask_samples,
                        policy_objective_masked, policy_objective_tracerl,
                        record_old_logprobs, standardize_rewards,
                        trace_logprobs)
from .rl.value import (GaeConfig, assign_terminal_reward, gae_recursive,
                       valid_steps, value_loss)
from .sft import SftConfig, TokenAccount, collect_traces, loss_full_random, \
    loss_semi_ar, loss_trace_sft
from .trajectory import reblock, shrink


@dataclass
class RlRunConfig:
    iterations: int = 50
    tasks_per_iter: int = 4
    group_size: int = 4
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    gae: GaeConfig = field(default_factory=GaeConfig)
    use_value: bool = False
    value_interval: int = 1            # value step every this many iterations
    lr: float = 3e-4                   # policy (1e-6 at full scale)
    value_lr: float = 1e-3             # value head (5e-6 at full scale)
    grad_clip: float = 1.0
    advantage_norm: bool = True        # re-standardize token advantages per batch
    value_group_centered: bool = True  # GAE terminal = group-standardized reward
    seed: int = 0
    checkpoint_interval: int = 0       # 0 = final only
    out_dir: str | None = None

    def __post_init__(self):
        for name in ("iterations", "tasks_per_iter", "group_size",
                     "value_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class IterationReport:
    iteration: int
    mean_reward: float
    std_reward: float
    groups_dropped: int
    mean_acceleration: float
    mean_response_len: float
    mean_kl: float
    policy_objective: float
    value_loss: float
    grad_norm: float
    wall_time: float

    def validate(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v):
                raise ValueError(f"non-finite report field {k}")


class MetricsWriter:
    """CSV rows per iteration plus a line-delimited JSON event log."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self._csv = None
        if out_dir is not None:
            import os
            os.makedirs(out_dir, exist_ok=True)
            self._csv_path = f"{out_dir}/metrics.csv"
            self._events_path = f"{out_dir}/events.jsonl"
            with open(self._events_path, "w"):
                pass

    def report(self, rep: IterationReport):
        if self.out_dir is None:
            return
        row = asdict(rep)
        write_header = self._csv is None
        with open(self._csv_path, "a" if not write_header else "w",
                  newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(row))
            if write_header:
                w.writeheader()
                self._csv = True
            w.writerow(row)

    def event(self, kind: str, **payload):
        if self.out_dir is None:
            return
        with open(self._events_path, "a") as f:
            f.write(json.dumps({"event": kind, **payload}) + "\n")


class TrainingAborted(RuntimeError):
    """Non-finite objective; the offending batch was dumped if out_dir set."""


def rollout_seed(base_seed: int, iteration: int, task_idx: int, g: int) -> int:
    return int(np.random.default_rng(
        (base_seed, iteration, task_idx, g)).integers(2 ** 31))


def _collect_group(rollout_params, task, cfg: RlRunConfig, iteration: int,
                   task_idx: int, spec: toy.RewardSpec):
    prompt_ids = toy.encode(task.prompt)
    group = []
    for g in range(cfg.group_size):
        scfg = replace(cfg.sampler, seed=rollout_seed(cfg.seed, iteration, task_idx, g))
        res = generate(rollout_params, prompt_ids, scfg)
        reward = toy.verify(toy.decode(res.text_tokens), task, spec)
        group.append((res, reward))
    return prompt_ids, group


def _token_advantages(rollout: TraceRollout, old_params, gae: GaeConfig,
                      terminal: float):
    """GAE token advantages/returns from the frozen value model."""
    with ad.no_grad():
        _, vals = trace_logprobs(old_params, rollout.prompt_ids, rollout.strace,
                                 return_values=True)
    values = [v.value.copy() for v in vals]
    steps = valid_steps(rollout.strace.steps, rollout.strace.post_eos)
    rewards = assign_terminal_reward([p for p, _ in steps], terminal)
    tables = gae_recursive(rewards, values, gae)
    return tables.advantages, tables.returns, values


def _value_params(params: ModelParams) -> dict:
    return {k: t for k, t in params.items() if k.startswith("value_")}


def run_rl(params: ModelParams, task_list, cfg: RlRunConfig,
           method: str = "tracerl", train_params: ModelParams | None = None,
           reblock_to: int | None = None, spec: toy.RewardSpec = toy.RewardSpec()):
    """
    One RL run; returns (params, list of IterationReport). `method` selects
    the trace objective or a masking baseline. `train_params` (sharing
    tensors with `params`) and `reblock_to` support training under a larger
    block size than the rollout's.
    """
    if method not in ("tracerl", "random_masking", "coupled"):
        raise ValueError(f"unknown method {method!r}")
    train = train_params if train_params is not None else params
    writer = MetricsWriter(cfg.out_dir)
    opt = Adam(train, lr=cfg.lr, grad_clip=cfg.grad_clip)
    vopt = Adam(ModelParams(train.config, _value_params(train)),
                lr=cfg.value_lr, grad_clip=cfg.grad_clip) if cfg.use_value else None
    shrink_block = (train.config.block_size
                    if train.config.attention_mode == "block" else None)
    mask_rng = np.random.default_rng((cfg.seed, 777))
    reports = []
    for it in range(cfg.iterations):
        t0 = time.time()
        old_train = train.copy()
        rollouts = []
        all_rewards = []
        dropped = 0
        accel, resp_len = [], []
        for i in range(cfg.tasks_per_iter):
            task_idx = (it * cfg.tasks_per_iter + i) % len(task_list)
            task = task_list[task_idx]
            prompt_ids, group = _collect_group(params, task, cfg, it,
                                               task_idx, spec)
            rewards = [r for _, r in group]
            all_rewards.extend(rewards)
            for res, _ in group:
                accel.append(acceleration_ratio(res.trace))
                resp_len.append(res.trace.response_len)
            advs = standardize_rewards(rewards)
            if advs is None:
                dropped += 1
                continue
            for g, (res, reward) in enumerate(group):
                trace = res.trace
                if reblock_to is not None:
                    trace = reblock(trace, cfg.sampler.block_size, reblock_to)
                strace = shrink(trace, cfg.policy.shrink, block_size=shrink_block)
                ro = TraceRollout(prompt_ids, trace, strace, reward,
                                  advantage=float(advs[g]))
                if method == "tracerl":
                    record_old_logprobs(old_train, ro)
                else:
                    attach_mask_samples(old_train, ro, cfg.policy, mask_rng,
                                        coupled=(method == "coupled"))
                if cfg.use_value:
                    # group-centered terminal keeps the group-relative
                    # baseline underneath the critic's token refinement
                    terminal = (ro.advantage if cfg.value_group_centered
                                else ro.reward)
                    ro.token_advantages, ro.returns, ro.v_old = \
                        _token_advantages(ro, old_train, cfg.gae, terminal)
                rollouts.append(ro)
        if cfg.use_value and rollouts and cfg.advantage_norm:
            flat = np.concatenate([np.concatenate(ro.token_advantages)
                                   for ro in rollouts])
            std = flat.std()
            if std > 1e-8:
                for ro in rollouts:
                    ro.token_advantages = [(a - flat.mean()) / std
                                           for a in ro.token_advantages]
        mean_kl = pol_obj = vloss_val = gnorm = 0.0
        if rollouts:
            for _ in range(cfg.policy.epochs):
                opt.zero_grad()
                if method == "tracerl":
                    loss, diag = policy_objective_tracerl(rollouts, train, cfg.policy)
                else:
                    loss, diag = policy_objective_masked(
                        rollouts, train, cfg.policy, coupled=(method == "coupled"))
                if not np.isfinite(loss.value):
                    _dump_batch(cfg, writer, it, rollouts)
                    raise TrainingAborted(f"non-finite policy loss at iteration {it}")
                loss.backward()
                gnorm = opt.step()
                mean_kl = diag["kl_mean"]
                pol_obj = -loss.item()
            if cfg.use_value and it % cfg.value_interval == 0:
                vopt.zero_grad()
                vterms = []
                for ro in rollouts:
                    _, vals = trace_logprobs(train, ro.prompt_ids, ro.strace,
                                             return_values=True)
                    for t, v in enumerate(vals):
                        vterms.append(value_loss(v, ro.v_old[t], ro.returns[t],
                                                 cfg.gae.value_clip))
                vloss = ad.mul(vterms[0], 0.0)
                for t in vterms:
                    vloss = ad.add(vloss, t)
                vloss = ad.mul(vloss, 1.0 / len(vterms))
                if not np.isfinite(vloss.value):
                    _dump_batch(cfg, writer, it, rollouts)
                    raise TrainingAborted(f"non-finite value loss at iteration {it}")
                vloss.backward()
                vopt.step()
                vloss_val = vloss.item()
        rep = IterationReport(
            iteration=it,
            mean_reward=float(np.mean(all_rewards)),
            std_reward=float(np.std(all_rewards)),
            groups_dropped=dropped,
            mean_acceleration=float(np.mean(accel)),
            mean_response_len=float(np.mean(resp_len)),
            mean_kl=mean_kl,
            policy_objective=pol_obj,
            value_loss=vloss_val,
            grad_norm=gnorm,
            wall_time=time.time() - t0,
        )
        rep.validate()
        reports.append(rep)
        writer.report(rep)
        if cfg.out_dir and cfg.checkpoint_interval and \
                (it + 1) % cfg.checkpoint_interval == 0:
            train.save(f"{cfg.out_dir}/checkpoint_{it + 1:04d}.npz")
    if cfg.out_dir:
        train.save(f"{cfg.out_dir}/checkpoint_final.npz")
    return train, reports


def _dump_batch(cfg: RlRunConfig, writer: MetricsWriter, it: int, rollouts):
    if cfg.out_dir is None:
        return
    from .decoder import TraceRecord, dump_traces
    recs = [TraceRecord("dump", "", ro.trace, ro.reward, 0) for ro in rollouts]
    dump_traces(recs, f"{cfg.out_dir}/abort_batch_iter{it}.jsonl")
    writer.event("abort", iteration=it)


def run_baseline(params: ModelParams, task_list, cfg: RlRunConfig,
                 method: str = "random_masking", **kw):
    if method not in ("random_masking", "coupled"):
        raise ValueError(f"unknown baseline {method!r}")
    return run_rl(params, task_list, cfg, method=method, **kw)


def run_block_enlargement(params: ModelParams, task_list, cfg: RlRunConfig,
                          b_rollout: int, b_train: int, switch_iteration: int,
                          **kw):
    """
    Phase 1 rolls out at b_rollout while training under b_train block
    structure (traces regrouped); phase 2 rolls out at b_train directly.
    """
    if b_train % b_rollout:
        raise ValueError("b_train must be a multiple of b_rollout")
    if not 0 <= switch_iteration <= cfg.iterations:
        raise ValueError("switch_iteration out of range")
    train = params
    if params.config.attention_mode == "block" and \
            params.config.block_size != b_train:
        train = ModelParams(replace(params.config, block_size=b_train),
                            params.tensors)
    rollout1 = params
    if params.config.attention_mode == "block" and \
            params.config.block_size != b_rollout:
        rollout1 = ModelParams(replace(params.config, block_size=b_rollout),
                               params.tensors)
    reports = []
    if switch_iteration:
        cfg1 = replace(cfg, iterations=switch_iteration,
                       sampler=replace(cfg.sampler, block_size=b_rollout))
        _, r1 = run_rl(rollout1, task_list, cfg1, train_params=train,
                       reblock_to=(b_train if b_train != b_rollout else None), **kw)
        reports.extend(r1)
    if cfg.iterations > switch_iteration:
        cfg2 = replace(cfg, iterations=cfg.iterations - switch_iteration,
                       sampler=replace(cfg.sampler, block_size=b_train),
                       seed=cfg.seed + 1, out_dir=None)
        _, r2 = run_rl(train, task_list, cfg2, **kw)
        reports.extend(r2)
    return train, reports


# -- evaluation -----------------------------------------------------------


def eval_accuracy(params: ModelParams, task_list, sampler: SamplerConfig,
                  spec: toy.RewardSpec = toy.RewardSpec(), seed: int = 0):
    """Greedy decoding accuracy and mean acceleration over the tasks."""
    scfg = replace(sampler, top_k=1)
    total = 0.0
    accel = []
    for ti, task in enumerate(task_list):
        res = generate(params, toy.encode(task.prompt),
                       replace(scfg, seed=seed + ti))
        total += toy.verify(toy.decode(res.text_tokens), task, spec)
        accel.append(acceleration_ratio(res.trace))
    return total / len(task_list), float(np.mean(accel))


# -- supervised training --------------------------------------------------


@dataclass
class SftRunConfig:
    objective: str = "random"          # "random" | "semi_ar" | "trace"
    steps: int = 200
    batch_size: int = 8
    block: int = 4                     # semi-AR block size
    trace_step_len: int = 2            # trace collection grouping
    lr: float = 1e-3
    grad_clip: float = 1.0
    seed: int = 0
    token_budget: int = 0              # stop when tokens_forwarded exceeds this
    sft: SftConfig = field(default_factory=SftConfig)

    def __post_init__(self):
        if self.objective not in ("random", "semi_ar", "trace"):
            raise ValueError(f"unknown objective {self.objective!r}")


def train_sft(params: ModelParams, items, cfg: SftRunConfig,
              trace_params: ModelParams | None = None):
    """
    Returns (params, total TokenAccount, per-step losses). For the trace
    objective, `trace_params` optionally supplies a teacher whose decoding
    order is used when collecting the trace records; default is the model
    being trained.
    """
    opt = Adam(params, lr=cfg.lr, grad_clip=cfg.grad_clip)
    rng = np.random.default_rng(cfg.seed)
    account = TokenAccount()
    losses = []
    traces = None
    for step in range(cfg.steps):
        idx = rng.choice(len(items), size=min(cfg.batch_size, len(items)),
                         replace=False)
        batch = [items[i] for i in idx]
        seed = int(rng.integers(2 ** 31))
        if cfg.objective == "random":
            loss, acc = loss_full_random(batch, params, cfg.sft, seed)
        elif cfg.objective == "semi_ar":
            loss, acc = loss_semi_ar(batch, params, cfg.block, cfg.sft, seed)
        else:
            if traces is None:   # one offline collection pass over the data
                traces = collect_traces(trace_params or params, items,
                                        cfg.trace_step_len)
            loss, acc = loss_trace_sft([traces[i] for i in idx], params)
        if not np.isfinite(loss.value):
            raise TrainingAborted(f"non-finite SFT loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        account = account + acc
        losses.append(loss.item())
        if cfg.token_budget and account.tokens_forwarded >= cfg.token_budget:
            break
    return params, account, losses
