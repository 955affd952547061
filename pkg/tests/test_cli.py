"""Command-line surface: config loading, overrides, subcommand smoke runs."""

import numpy as np
import pytest
import yaml

from tracedlm.cli import build_config, load_config, main
from tracedlm.driver import RlRunConfig, SftRunConfig
from tracedlm.model import ModelParams


TINY_MODEL = ["--set", "model.d_model=16", "--set", "model.n_layers=1",
              "--set", "model.n_heads=2", "--set", "model.max_len=48"]


def test_load_config_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"rl_run": {"iterations": 5}}))
    cfg = load_config(str(p), ["rl_run.iterations=7", "rl_run.lr=0.01",
                               "rl_run.advantage_norm=false", "method=coupled"])
    assert cfg["rl_run"] == {"iterations": 7, "lr": 0.01,
                             "advantage_norm": False}
    assert cfg["method"] == "coupled"
    with pytest.raises(SystemExit):
        load_config(None, ["notkeyvalue"])


def test_build_config_nested_and_unknown_keys():
    run = build_config(RlRunConfig, {"iterations": 3,
                                     "sampler": {"block_size": 4},
                                     "policy": {"clip_eps": 0.1}})
    assert run.iterations == 3
    assert run.sampler.block_size == 4
    assert run.policy.clip_eps == 0.1
    with pytest.raises(SystemExit):
        build_config(SftRunConfig, {"stepz": 1})


def test_cmd_sft_and_eval(tmp_path, capsys):
    ckpt = str(tmp_path / "m.npz")
    rc = main(["sft", *TINY_MODEL,
               "--set", "sft_run.steps=2", "--set", "sft_run.batch_size=2",
               "--set", "tasks.count=4", "--set", "tasks.difficulty=1",
               "--set", f"out_checkpoint={ckpt}"])
    assert rc == 0
    assert "tokens_forwarded" in capsys.readouterr().out
    m = ModelParams.load(ckpt)
    assert m.config.d_model == 16
    rc = main(["eval", "--set", f"checkpoint={ckpt}",
               "--set", "tasks.count=2", "--set", "tasks.difficulty=1",
               "--set", "sampler.max_new_tokens=6"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "accuracy=" in out and "acceleration=" in out


def test_cmd_sample(tmp_path, capsys):
    dump = str(tmp_path / "trace.jsonl")
    rc = main(["sample", *TINY_MODEL,
               "--set", "tasks.difficulty=1",
               "--set", "sampler.max_new_tokens=6",
               "--set", f"trace_dump={dump}"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "response:" in out and "acceleration=" in out
    assert open(dump).read().strip()


def test_cmd_rl_and_baseline(capsys):
    common = [*TINY_MODEL,
              "--set", "model.attention_mode=block",
              "--set", "model.block_size=2",
              "--set", "rl_run.iterations=1",
              "--set", "rl_run.tasks_per_iter=2",
              "--set", "rl_run.group_size=2",
              "--set", "rl_run.sampler.block_size=2",
              "--set", "rl_run.sampler.max_new_tokens=6",
              "--set", "tasks.count=4", "--set", "tasks.difficulty=1"]
    assert main(["rl", *common]) == 0
    assert "final_reward=" in capsys.readouterr().out
    assert main(["rl-baseline", *common, "--set", "method=coupled"]) == 0
    assert "method=coupled" in capsys.readouterr().out
    assert main(["enlarge-block", *common, "--set", "b_rollout=2",
                 "--set", "b_train=4", "--set", "switch_iteration=1"]) == 0
    assert "b_train=4" in capsys.readouterr().out


def test_cmd_grad_check(capsys):
    assert main(["grad-check"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_cmd_oracle_check(capsys):
    assert main(["oracle-check"]) == 0
    out = capsys.readouterr().out
    assert "gae_tables" in out and "FAIL" not in out
