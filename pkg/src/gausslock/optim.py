"""First-order optimizers over flat parameter vectors with global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adamw"  # or "sgd"
    lr: float = 3e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0  # <= 0 disables clipping

    def __post_init__(self):
        if self.name not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> AdamState:
        return cls(np.zeros(size), np.zeros(size), 0)


def clip_by_global_norm(g: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(g))
    if max_norm > 0 and norm > max_norm:
        g = g * (max_norm / norm)
    return g, norm


@numba.njit(cache=True, fastmath=True)
def _adamw_kernel(theta, m, v, g, gscale, lr, wd, b1, b2, eps, c1, c2):
    out = np.empty_like(theta)
    decay = 1.0 - lr * wd
    step = lr / c1
    inv_c2 = 1.0 / np.sqrt(c2)
    for i in range(theta.size):
        gi = g[i] * gscale
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        out[i] = theta[i] * decay - step * mi / (np.sqrt(vi) * inv_c2 + eps)
    return out


def adamw_step(theta: np.ndarray, state: AdamState, grads: np.ndarray, cfg: OptimizerConfig):
    """One clipped AdamW step with decoupled weight decay.

    Returns (new theta, new state, pre-clip grad norm). The moment buffers of
    ``state`` are reused by the returned state.
    """
    if theta.shape != grads.shape or state.m.shape != theta.shape:
        raise ValueError("parameter, gradient and state layouts differ")
    norm = float(np.linalg.norm(grads))
    gscale = cfg.grad_clip / norm if 0 < cfg.grad_clip < norm else 1.0
    t = state.t + 1
    m, v = state.m, state.v
    new = _adamw_kernel(theta, m, v, np.ascontiguousarray(grads, dtype=np.float64), gscale, cfg.lr,
                        cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps, 1.0 - cfg.beta1**t, 1.0 - cfg.beta2**t)
    return new, AdamState(m, v, t), norm


def sgd_step(theta: np.ndarray, state: AdamState, grads: np.ndarray, cfg: OptimizerConfig):
    g, norm = clip_by_global_norm(grads, cfg.grad_clip)
    return theta - cfg.lr * g, AdamState(state.m, state.v, state.t + 1), norm


def step(theta, state, grads, cfg: OptimizerConfig):
    if cfg.name == "adamw":
        return adamw_step(theta, state, grads, cfg)
    return sgd_step(theta, state, grads, cfg)
