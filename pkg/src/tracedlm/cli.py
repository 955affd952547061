"""
Command-line entry points. Every run is described by a YAML config whose
keys mirror the run-config dataclasses; `--set section.key=value` flags
override file values. Subcommands: sft, rl, rl-baseline, enlarge-block,
sample, eval, grad-check, oracle-check.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np
import yaml

from . import tasks as toy
from .decoder import SamplerConfig, generate, TraceRecord, dump_traces
from .driver import (RlRunConfig, SftRunConfig, eval_accuracy, run_baseline,
                     run_block_enlargement, run_rl, train_sft)
from .model import ModelConfig, ModelParams, init_params
from .oracles import run_oracle_battery
from .rl.policy import PolicyConfig
from .rl.value import GaeConfig
from .sft import SftConfig


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    return value


def load_config(path: str | None, overrides) -> dict:
    cfg = {}
    if path:
        with open(path) as f:
            cfg = yaml.safe_load(f) or {}
    for item in overrides or ():
        key, _, value = item.partition("=")
        if not _:
            raise SystemExit(f"override {item!r} is not key=value")
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _coerce(value)
    return cfg


_NESTED = {
    RlRunConfig: {"sampler": SamplerConfig, "policy": PolicyConfig,
                  "gae": GaeConfig},
    SftRunConfig: {"sft": SftConfig},
}


def build_config(cls, d: dict):
    d = dict(d or {})
    for name, sub in _NESTED.get(cls, {}).items():
        if name in d and isinstance(d[name], dict):
            d[name] = build_config(sub, d[name])
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise SystemExit(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def _load_model(cfg: dict) -> ModelParams:
    if "checkpoint" in cfg:
        return ModelParams.load(cfg["checkpoint"])
    mc = build_config(ModelConfig, {"vocab_size": toy.VOCAB_SIZE,
                                    **cfg.get("model", {})})
    return init_params(mc, seed=int(cfg.get("init_seed", 0)))


def _task_list(cfg: dict):
    t = cfg.get("tasks", {})
    family = t.get("family", "addition")
    difficulty = int(t.get("difficulty", 2))
    n = int(t.get("count", 32))
    base = int(t.get("seed", 0))
    return [toy.gen_task(base + i, family, difficulty) for i in range(n)]


def cmd_sft(cfg: dict) -> int:
    model = _load_model(cfg)
    run = build_config(SftRunConfig, cfg.get("sft_run", {}))
    t = cfg.get("tasks", {})
    items = toy.make_sft_items(int(t.get("count", 64)),
                               t.get("family", "addition"),
                               int(t.get("difficulty", 2)),
                               seed=int(t.get("seed", 0)))
    model, account, losses = train_sft(model, items, run)
    out = cfg.get("out_checkpoint", "sft_model.npz")
    model.save(out)
    print(f"steps={len(losses)} final_loss={losses[-1]:.4f} "
          f"tokens_forwarded={account.tokens_forwarded} saved={out}")
    return 0


def _rl_common(cfg: dict):
    model = _load_model(cfg)
    run = build_config(RlRunConfig, cfg.get("rl_run", {}))
    return model, _task_list(cfg), run


def cmd_rl(cfg: dict) -> int:
    model, task_list, run = _rl_common(cfg)
    model, reports = run_rl(model, task_list, run)
    print(f"iterations={len(reports)} final_reward={reports[-1].mean_reward:.3f}")
    return 0


def cmd_rl_baseline(cfg: dict) -> int:
    model, task_list, run = _rl_common(cfg)
    method = cfg.get("method", "random_masking")
    model, reports = run_baseline(model, task_list, run, method=method)
    print(f"method={method} iterations={len(reports)} "
          f"final_reward={reports[-1].mean_reward:.3f}")
    return 0


def cmd_enlarge_block(cfg: dict) -> int:
    model, task_list, run = _rl_common(cfg)
    b_roll = int(cfg.get("b_rollout", run.sampler.block_size))
    b_train = int(cfg.get("b_train", 2 * b_roll))
    switch = int(cfg.get("switch_iteration", run.iterations * 3 // 5))
    model, reports = run_block_enlargement(model, task_list, run,
                                           b_roll, b_train, switch)
    print(f"b_rollout={b_roll} b_train={b_train} "
          f"final_reward={reports[-1].mean_reward:.3f}")
    return 0


def cmd_sample(cfg: dict) -> int:
    model = _load_model(cfg)
    scfg = build_config(SamplerConfig, cfg.get("sampler", {}))
    prompt = cfg.get("prompt")
    if prompt is None:
        task = _task_list(cfg)[0]
        prompt = task.prompt
    res = generate(model, toy.encode(prompt), scfg)
    print(f"prompt: {prompt}")
    print(f"response: {toy.decode(res.text_tokens)}")
    print(f"steps={res.num_steps} tokens={res.trace.response_len} "
          f"acceleration={acceleration(res):.2f}")
    dump = cfg.get("trace_dump")
    if dump:
        dump_traces([TraceRecord("sample", prompt, res.trace, 0.0, scfg.seed)],
                    dump)
    return 0


def acceleration(res):
    from .decoder import acceleration_ratio
    return acceleration_ratio(res.trace)


def cmd_eval(cfg: dict) -> int:
    model = _load_model(cfg)
    scfg = build_config(SamplerConfig, cfg.get("sampler", {}))
    acc, accel = eval_accuracy(model, _task_list(cfg), scfg,
                               seed=int(cfg.get("eval_seed", 0)))
    print(f"accuracy={acc:.3f} acceleration={accel:.2f}")
    return 0


def cmd_grad_check(cfg: dict) -> int:
    from . import autodiff as ad
    from .sft import loss_full_random

    mc = ModelConfig(vocab_size=toy.VOCAB_SIZE, d_model=16, n_layers=1,
                     n_heads=2, max_len=32)
    model = init_params(mc, seed=1)
    items = toy.make_sft_items(2, seed=0)

    def loss_fn(_):
        return loss_full_random(items, model, SftConfig(), seed=5)[0]

    err = ad.grad_check(loss_fn, dict(model.items()), max_coords=4)
    ok = err <= 1e-4
    print(f"loss_full_random grad check: max rel err {err:.2e} "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_oracle_check(cfg: dict) -> int:
    reports = run_oracle_battery()
    width = max(len(r.name) for r in reports)
    ok = True
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{r.name:<{width}}  cases={r.cases:<5d} "
              f"max_err={r.max_abs_err:.3e} tol={r.tolerance:.3e}  {status}")
    return 0 if ok else 1


COMMANDS = {
    "sft": cmd_sft,
    "rl": cmd_rl,
    "rl-baseline": cmd_rl_baseline,
    "enlarge-block": cmd_enlarge_block,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tracedlm")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML run config")
        p.add_argument("--set", action="append", dest="overrides",
                       metavar="KEY=VALUE", help="override a config entry")
    args = parser.parse_args(argv)
    cfg = load_config(args.config, args.overrides)
    return COMMANDS[args.command](cfg)


if __name__ == "__main__":
    sys.exit(main())
