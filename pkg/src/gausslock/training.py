"""Shared training-loop machinery: batch schedules, the parameter-space fit
objective, and a regression loop used by base training and the attacker."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, is_dataclass

import numpy as np

from . import core
from .autodiff import flatten, param_names, unflatten
from .errors import EmptyDataset, NonFiniteInput, NonFiniteLoss, NotUnit
from .generator import GeneratorWeights, backward, forward, forward_with_cache
from .optim import AdamState, OptimizerConfig, step as opt_step


class BatchSampler:
    """Sequential draws with wraparound; reshuffled at every epoch boundary."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise EmptyDataset("cannot sample batches from an empty dataset")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        out = []
        while len(out) < self.batch_size:
            if self._pos == self.n:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
            out.append(self._perm[self._pos])
            self._pos += 1
        return np.array(out)


def config_hash(cfg) -> str:
    def enc(o):
        if isinstance(o, (set, frozenset)):
            return sorted(o)
        if is_dataclass(o):
            return asdict(o)
        raise TypeError(type(o))

    data = asdict(cfg) if is_dataclass(cfg) else cfg
    text = json.dumps(data, sort_keys=True, default=enc)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def fit_loss(raw: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean |activate(raw) - gt| over every channel of every sample, and its raw gradient.

    ``raw`` and ``gt`` are (B, N, 14); ``gt`` is in the activated layout.
    """
    raw = np.asarray(raw)
    if raw.shape != gt.shape:
        raise ValueError(f"shape mismatch {raw.shape} vs {gt.shape}")
    total = 0.0
    grad = np.empty_like(raw)
    size = raw.size
    for b in range(raw.shape[0]):
        cloud = core.activate(raw[b])
        diff = cloud.to_array() - gt[b]
        total += float(np.abs(diff).sum())
        grad[b] = core.activation_vjp(raw[b], cloud, np.sign(diff) / size)
    return total / size, grad


class ParamState:
    """Trainable parameters of a model as one flat vector plus optimizer state."""

    def __init__(self, model: GeneratorWeights, which: str, opt: OptimizerConfig):
        self.base = model
        self.which = which
        self.names = param_names(model, which)
        params = {**model.params(), **model.adapter_params()}
        self.theta, self.layout = flatten(params, self.names)
        self.opt = opt
        self.state = AdamState.zeros(self.theta.size)

    def model(self) -> GeneratorWeights:
        return self.base.with_params(unflatten(self.theta, self.layout))

    def grads(self, model: GeneratorWeights, cache, upstream: np.ndarray) -> np.ndarray:
        g = backward(model, cache, upstream.reshape(upstream.shape[0], -1),
                     want_base=self.which in ("base", "all"), want_adapters=self.which in ("adapters", "all"))
        return flatten(g, self.names)[0]

    def apply(self, flat_grad: np.ndarray) -> float:
        self.theta, self.state, norm = opt_step(self.theta, self.state, flat_grad, self.opt)
        return norm


@dataclass
class RegressionResult:
    snapshots: list  # [(step, GeneratorWeights)]
    log: list  # per-step dicts


def train_regression(model: GeneratorWeights, conds: np.ndarray, targets: np.ndarray, steps: int,
                     opt: OptimizerConfig, seed: int, which: str = "base", batch_size: int = 4,
                     snapshot_every: int = 0, train_mode: bool = False, sign: float = 1.0) -> RegressionResult:
    """Minimise ``sign * fit_loss`` over ``steps`` batches.

    Snapshots (including step 0) are taken every ``snapshot_every`` steps and
    at the end.
    """
    if len(conds) == 0:
        raise EmptyDataset("regression needs at least one sample")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    sampler = BatchSampler(len(conds), batch_size, rng)
    ps = ParamState(model, which, opt)
    snaps = [(0, ps.model())] if snapshot_every else []
    log = []
    for k in range(steps):
        idx = sampler.next()
        m = ps.model()
        out, cache = forward_with_cache(m, conds[idx], train_mode=train_mode, rng=drop_rng)
        raw = out.reshape(len(idx), m.n_gaussians, core.N_CHANNELS)
        try:
            loss, g = fit_loss(raw, targets[idx])
        except (NonFiniteInput, NotUnit) as e:
            raise NonFiniteLoss(k, f"outputs diverged ({e})") from None
        if not np.isfinite(loss):
            raise NonFiniteLoss(k, "fit loss")
        norm = ps.apply(ps.grads(m, cache, sign * g))
        log.append({"step": k, "kind": "fit", "loss": loss, "grad_norm": norm})
        if snapshot_every and (k + 1) % snapshot_every == 0:
            snaps.append((k + 1, ps.model()))
    if snapshot_every and (not snaps or snaps[-1][0] != steps):
        snaps.append((steps, ps.model()))
    if not snapshot_every:
        snaps.append((steps, ps.model()))
    return RegressionResult(snaps, log)


def mean_fit(model: GeneratorWeights, conds: np.ndarray, targets: np.ndarray) -> float:
    raw = forward(model, conds)
    return fit_loss(raw, targets)[0]
