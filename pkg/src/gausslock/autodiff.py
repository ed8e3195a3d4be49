"""Gradient plumbing: flat gradient bundles over named parameters and a
finite-difference checker that stays independent of the analytic path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import N_CHANNELS
from .errors import ShapeMismatch
from .generator import GeneratorWeights, _as_batch, backward, forward_with_cache


@dataclass(frozen=True)
class GradBundle:
    loss: float
    grads: np.ndarray
    layout: tuple  # ((name, shape), ...)

    def __post_init__(self):
        size = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.grads.size != size:
            raise ShapeMismatch(f"gradient length {self.grads.size} != layout size {size}")

    def as_dict(self) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.grads[off : off + n].reshape(shape)
            off += n
        return out

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.grads))


def flatten(params: dict[str, np.ndarray], names=None) -> tuple[np.ndarray, tuple]:
    names = list(params) if names is None else list(names)
    layout = tuple((n, params[n].shape) for n in names)
    flat = np.concatenate([params[n].ravel() for n in names]) if names else np.zeros(0)
    return flat, layout


def unflatten(flat: np.ndarray, layout) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape))
        out[name] = flat[off : off + n].reshape(shape)
        off += n
    return out


def param_names(weights: GeneratorWeights, which: str = "base") -> list[str]:
    if which == "base":
        return list(weights.params())
    if which == "adapters":
        return list(weights.adapter_params())
    if which == "all":
        return list(weights.params()) + list(weights.adapter_params())
    raise ValueError(f"unknown parameter group {which!r}")


def bundle(grads: dict[str, np.ndarray], names, loss: float = 0.0) -> GradBundle:
    flat, layout = flatten(grads, names)
    return GradBundle(float(loss), flat, layout)


def backprop_through_generator(weights: GeneratorWeights, cond, upstream, which: str = "base",
                               loss: float = 0.0) -> GradBundle:
    """Gradient of sum(upstream * forward(weights, cond)) w.r.t. the chosen parameters."""
    X, single = _as_batch(weights, cond)
    up = np.asarray(upstream, dtype=np.float64)
    expected = (X.shape[0], weights.n_gaussians, N_CHANNELS)
    if single and up.shape == expected[1:]:
        up = up[None]
    if up.shape != expected:
        raise ShapeMismatch(f"upstream shape {np.shape(upstream)} does not match generator output {expected}")
    _, cache = forward_with_cache(weights, X)
    names = param_names(weights, which)
    grads = backward(weights, cache, up.reshape(X.shape[0], -1),
                     want_base=which in ("base", "all"), want_adapters=which in ("adapters", "all"))
    return bundle(grads, names, loss)


def fd_check(objective, theta, grad, samples: int = 50, h: float = 1e-5, seed: int = 0,
             floor: float = 1e-6) -> float:
    """Max relative error between ``grad`` and central differences of ``objective``.

    Checks ``samples`` coordinates drawn without replacement (seeded). The
    relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0 or samples < 1:
        raise ValueError("need h > 0 and samples >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64).ravel()
    flat = theta.ravel()
    rng = np.random.default_rng(seed)
    idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
    worst = 0.0
    for i in idx:
        tp = flat.copy()
        tp[i] += h
        tm = flat.copy()
        tm[i] -= h
        num = (objective(tp.reshape(theta.shape)) - objective(tm.reshape(theta.shape))) / (2.0 * h)
        ana = grad[i]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return worst
