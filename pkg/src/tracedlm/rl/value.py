"""
Step-wise generalized advantage estimation over decoding traces, plus the
clipped value regression loss.

A trace's steps play the role of time. Per-token rewards (terminal reward
on the final step) and per-token value predictions are aggregated into
step means r*_t, V*_t; returns and advantages follow the standard GAE
recursions at step level and are mapped back to tokens:

    R*_t = r*_t + g R*_{t+1}
    d*_t = r*_t - V*_t + g V*_{t+1}
    A*_t = d*_t + g l A*_{t+1}
    R_j  = r_j + g R*_{t_j + 1}
    A_j  = (r_j - V_j) + g V*_{t_j + 1} + g l A*_{t_j + 1}

Both a backward recursion and an equivalent forward closed form are
provided; tests pin their agreement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor


@dataclass
class GaeConfig:
    gamma: float = 1.0
    lam: float = 1.0
    value_clip: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ValueError("gamma and lam must lie in [0, 1]")
        if self.value_clip <= 0:
            raise ValueError("value_clip must be positive")


@dataclass
class GaeTables:
    """Per-step arrays, position-sorted within each step."""
    positions: list        # [T] int arrays
    rewards: list          # [T] float arrays, r_j
    values: list           # [T] float arrays, V_j
    step_reward: np.ndarray    # r*_t
    step_value: np.ndarray     # V*_t
    step_return: np.ndarray    # R*_t
    step_advantage: np.ndarray # A*_t
    returns: list          # [T] float arrays, R_j
    advantages: list       # [T] float arrays, A_j

    @property
    def num_tokens(self) -> int:
        return sum(len(p) for p in self.positions)


def valid_steps(steps, post_eos):
    """(positions, tokens) per step with post-EOS tokens dropped; empty steps removed."""
    out = []
    for st in steps:
        kept = sorted((p, tok) for p, tok in st if p not in post_eos)
        if kept:
            out.append((np.array([p for p, _ in kept], dtype=np.int64),
                        np.array([tok for _, tok in kept], dtype=np.int64)))
    if not out:
        raise ValueError("trace has no tokens before EOS")
    return out


def assign_terminal_reward(step_positions, reward: float):
    """Per-token rewards: zero everywhere, terminal reward on the final step."""
    out = [np.zeros(len(p)) for p in step_positions]
    out[-1][:] = reward
    return out


def step_aggregates(per_token: list) -> np.ndarray:
    return np.array([a.mean() for a in per_token])


def gae_recursive(rewards: list, values: list, cfg: GaeConfig) -> GaeTables:
    """Backward-recursion GAE; rewards/values are per-step token arrays."""
    T = len(rewards)
    if T != len(values) or T == 0:
        raise ValueError("rewards and values must be equal-length, non-empty")
    r_s = step_aggregates(rewards)
    v_s = step_aggregates(values)
    g, l = cfg.gamma, cfg.lam
    R_s = np.zeros(T)
    A_s = np.zeros(T)
    nxt_R = nxt_A = nxt_V = 0.0
    for t in range(T - 1, -1, -1):
        R_s[t] = r_s[t] + g * nxt_R
        A_s[t] = (r_s[t] - v_s[t] + g * nxt_V) + g * l * nxt_A
        nxt_R, nxt_A, nxt_V = R_s[t], A_s[t], v_s[t]
    returns, advs = [], []
    for t in range(T):
        nR = R_s[t + 1] if t + 1 < T else 0.0
        nA = A_s[t + 1] if t + 1 < T else 0.0
        nV = v_s[t + 1] if t + 1 < T else 0.0
        returns.append(rewards[t] + g * nR)
        advs.append((rewards[t] - values[t]) + g * nV + g * l * nA)
    return GaeTables([None] * T, rewards, values, r_s, v_s, R_s, A_s, returns, advs)


def gae_closed_form(rewards: list, values: list, cfg: GaeConfig) -> GaeTables:
    """
    Recursion-free expansion. Per token, with t = its step,

        R_j = r_j + sum_{k>=1} g^k r*_{t+k}
        A_j = r_j - V_j + sum_{k>=1} (g l)^k (r*_{t+k} + ((1-l)/l) V*_{t+k})

    with the l = 0 case routed to the direct TD form
    A_j = r_j - V_j + g V*_{t+1}.
    """
    T = len(rewards)
    if T != len(values) or T == 0:
        raise ValueError("rewards and values must be equal-length, non-empty")
    r_s = step_aggregates(rewards)
    v_s = step_aggregates(values)
    g, l = cfg.gamma, cfg.lam
    R_s = np.array([sum(g ** (u - t) * r_s[u] for u in range(t, T)) for t in range(T)])
    returns, advs = [], []
    A_s = np.empty(T)
    for t in range(T):
        tail_R = sum(g ** k * r_s[t + k] for k in range(1, T - t))
        if l == 0.0:
            tail_A = g * v_s[t + 1] if t + 1 < T else 0.0
        else:
            tail_A = sum((g * l) ** k * (r_s[t + k] + (1.0 - l) / l * v_s[t + k])
                         for k in range(1, T - t))
        returns.append(rewards[t] + tail_R)
        advs.append(rewards[t] - values[t] + tail_A)
        A_s[t] = r_s[t] - v_s[t] + tail_A
    return GaeTables([None] * T, rewards, values, r_s, v_s, R_s, A_s, returns, advs)


def value_loss(v_new: Tensor, v_old: np.ndarray, returns: np.ndarray,
               clip_eps: float) -> Tensor:
    """
    Clipped value regression, averaged over the trace's tokens:
        0.5 * mean_j max((V_j - R_j)^2, (V_clip_j - R_j)^2)
    with V_clip = V_old + clip(V - V_old, -eps, eps).
    """
    v_old = np.asarray(v_old)
    returns = np.asarray(returns)
    if v_new.shape != v_old.shape or v_new.shape != returns.shape:
        raise ad.ShapeError("value_loss operand shapes differ")
    diff = ad.add(v_new, -returns)
    clipped = ad.add(ad.clip(ad.add(v_new, -v_old), -clip_eps, clip_eps),
                     v_old - returns)
    worst = ad.maximum(ad.square(diff), ad.square(clipped))
    return ad.mul(ad.mean_(worst), 0.5)
