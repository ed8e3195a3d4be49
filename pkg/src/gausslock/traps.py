"""Attribute-space trap losses on activated Gaussian clouds.

Each single trap returns a :class:`TrapTerm` holding the loss value and its
gradient with respect to one attribute (positions, scales, quaternions,
colors, or the raw opacity logits). :func:`coupled_trap` averages the enabled
traps and maps everything back onto the ``(N, 14)`` raw layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import core

TRAP_NAMES = ("position", "scale", "rotation", "color", "opacity")

DEFAULT_EPS = 1e-6
DEFAULT_RATIO_CAP = 1e8
DEFAULT_TOPK_FRACTION = 0.02
_TIE_GAP = 1e-10


@dataclass(frozen=True)
class TrapConfig:
    enabled: frozenset = frozenset(TRAP_NAMES)
    epsilon: float = DEFAULT_EPS
    topk_fraction: float = DEFAULT_TOPK_FRACTION
    ratio_cap: float = DEFAULT_RATIO_CAP

    def __post_init__(self):
        object.__setattr__(self, "enabled", frozenset(self.enabled))
        unknown = self.enabled - set(TRAP_NAMES)
        if unknown:
            raise ValueError(f"unknown traps: {sorted(unknown)}")
        if not 0.0 < self.epsilon <= 1e-3:
            raise ValueError("epsilon must lie in (0, 1e-3]")
        if not 0.0 < self.topk_fraction <= 1.0:
            raise ValueError("topk_fraction must lie in (0, 1]")
        if self.ratio_cap <= 1.0:
            raise ValueError("ratio_cap must exceed 1")

    @property
    def ordered(self) -> list[str]:
        return [t for t in TRAP_NAMES if t in self.enabled]


class TrapTerm(NamedTuple):
    value: float
    grad: np.ndarray
    degenerate: bool = False


@dataclass
class TrapResult:
    value: float
    grad: np.ndarray  # (N, 14) w.r.t. the raw batch
    per_trap: dict = field(default_factory=dict)
    degenerate: frozenset = frozenset()


@dataclass(frozen=True)
class OpacityMask:
    indices: np.ndarray  # sorted, distinct

    @property
    def k(self) -> int:
        return int(self.indices.size)

    def validate(self, n: int) -> None:
        idx = self.indices
        if idx.size < 1 or idx.min() < 0 or idx.max() >= n or np.unique(idx).size != idx.size:
            raise ValueError(f"opacity mask invalid for N={n}")


def _ratio_log_loss(lmax: float, lmin: float, eps: float, cap: float) -> tuple[float, bool]:
    """Return (-log(clamped ratio), clamped?)."""
    ratio = lmax / (lmin + eps)
    if not ratio > 1.0 / cap:  # also catches ratio <= 0
        return math.log(cap), True
    if ratio > cap:
        return -math.log(cap), True
    return -math.log(ratio), False


def spectral_trap(C: np.ndarray, eps: float, cap: float = DEFAULT_RATIO_CAP):
    """-log(lambda_max / (lambda_min + eps)) and its derivative w.r.t. C.

    Returns (value, dL/dC, degenerate). The derivative is zero when the
    ratio is clamped.
    """
    e = core.sym3_eigen(C)
    lmax, lmid, lmin = e.lambdas
    degenerate = (lmax - lmid < _TIE_GAP) or (lmid - lmin < _TIE_GAP)
    value, clamped = _ratio_log_loss(lmax, lmin, eps, cap)
    if clamped:
        return value, np.zeros((3, 3)), degenerate
    vmax = e.vectors[:, 0]
    vmin = e.vectors[:, 2]
    G = -np.outer(vmax, vmax) / lmax + np.outer(vmin, vmin) / (lmin + eps)
    return value, G, degenerate


def _covariance_trap(x: np.ndarray, eps: float, cap: float) -> TrapTerm:
    if x.shape[0] < 2:
        raise ValueError("covariance trap needs at least two Gaussians")
    C = core.centralized_covariance(x)
    value, G, degenerate = spectral_trap(C, eps, cap)
    d = x - x.mean(axis=0)
    grad = (2.0 / x.shape[0]) * d @ G
    return TrapTerm(value, grad, degenerate)


def loss_position(cloud: core.GaussianCloud, eps: float = DEFAULT_EPS, ratio_cap: float = DEFAULT_RATIO_CAP) -> TrapTerm:
    return _covariance_trap(cloud.mu, eps, ratio_cap)


def loss_color(cloud: core.GaussianCloud, eps: float = DEFAULT_EPS, ratio_cap: float = DEFAULT_RATIO_CAP) -> TrapTerm:
    return _covariance_trap(cloud.c, eps, ratio_cap)


def loss_scale(cloud: core.GaussianCloud, eps: float = DEFAULT_EPS, ratio_cap: float = DEFAULT_RATIO_CAP) -> TrapTerm:
    s = cloud.s
    n = s.shape[0]
    u = s * s
    rows = np.arange(n)
    # argmax/argmin return the first occurrence: ties go to the lowest component
    imax = np.argmax(u, axis=1)
    imin = np.argmin(u, axis=1)
    umax = u[rows, imax]
    umin = u[rows, imin]
    ratio = umax / (umin + eps)
    clipped = np.clip(ratio, 1.0 / ratio_cap, ratio_cap)
    free = clipped == ratio
    value = float(-np.mean(np.log(clipped)))

    g_u = np.zeros_like(u)
    np.add.at(g_u, (rows[free], imax[free]), -1.0 / umax[free])
    np.add.at(g_u, (rows[free], imin[free]), 1.0 / (umin[free] + eps))
    grad = g_u * 2.0 * s / n
    return TrapTerm(value, grad)


def loss_rotation(cloud: core.GaussianCloud, eps: float = DEFAULT_EPS, ratio_cap: float = DEFAULT_RATIO_CAP) -> TrapTerm:
    """Gradient is w.r.t. q, projected onto the unit-quaternion tangent space."""
    q = cloud.q
    n = q.shape[0]
    if n < 2:
        raise ValueError("rotation trap needs at least two Gaussians")
    r = core.quat_to_axis(q)
    T = core.structure_tensor(r)
    value, G, degenerate = spectral_trap(T, eps, ratio_cap)
    g_r = (2.0 / n) * r @ G
    J = core.quat_axis_jacobian(q)
    g_q = np.einsum("ni,nij->nj", g_r, J)
    g_q -= q * np.sum(g_q * q, axis=1, keepdims=True)
    return TrapTerm(value, g_q, degenerate)


def build_opacity_mask(initial_cloud: core.GaussianCloud, topk_fraction: float = DEFAULT_TOPK_FRACTION) -> OpacityMask:
    o = np.asarray(initial_cloud.o)
    n = o.size
    if n < 1:
        raise ValueError("empty cloud")
    if not 0.0 < topk_fraction <= 1.0:
        raise ValueError("topk_fraction must lie in (0, 1]")
    k = max(1, min(n, math.ceil(topk_fraction * n - 1e-9)))
    order = np.argsort(-o, kind="stable")
    return OpacityMask(np.sort(order[:k]))


def smoothed_logit(o, eps: float = DEFAULT_EPS):
    return np.log(o + eps) - np.log(1.0 - o + eps)


def loss_opacity(cloud: core.GaussianCloud, mask: OpacityMask, eps: float = DEFAULT_EPS) -> TrapTerm:
    """Mean smoothed logit over the masked Gaussians; gradient w.r.t. the raw logit z."""
    o = cloud.o
    mask.validate(o.size)
    idx = mask.indices
    om = o[idx]
    value = float(np.mean(smoothed_logit(om, eps)))
    grad = np.zeros_like(o)
    dl_do = 1.0 / (om + eps) + 1.0 / (1.0 - om + eps)
    grad[idx] = dl_do * om * (1.0 - om) / idx.size
    return TrapTerm(value, grad)


def coupled_trap(cloud: core.GaussianCloud, cfg: TrapConfig, mask: OpacityMask | None = None) -> TrapResult:
    if not cfg.enabled:
        raise ValueError("coupled trap needs at least one enabled trap")
    if cloud.raw is None:
        raise ValueError("coupled_trap needs a cloud produced by core.activate (raw batch attached)")
    names = cfg.ordered
    m = len(names)
    eps, cap = cfg.epsilon, cfg.ratio_cap

    g_act = np.zeros((cloud.n, core.N_CHANNELS))
    g_z = np.zeros(cloud.n)
    per_trap = {}
    degenerate = set()
    for name in names:
        if name == "position":
            term = loss_position(cloud, eps, cap)
            g_act[:, core.POS] += term.grad
        elif name == "scale":
            term = loss_scale(cloud, eps, cap)
            g_act[:, core.SCALE] += term.grad
        elif name == "rotation":
            term = loss_rotation(cloud, eps, cap)
            g_act[:, core.QUAT] += term.grad
        elif name == "color":
            term = loss_color(cloud, eps, cap)
            g_act[:, core.COLOR] += term.grad
        else:
            if mask is None:
                raise ValueError("opacity trap enabled but no opacity mask given")
            term = loss_opacity(cloud, mask, eps)
            g_z += term.grad
        per_trap[name] = term.value
        if term.degenerate:
            degenerate.add(name)

    value = sum(per_trap[name] for name in names) / m
    grad = core.activation_vjp(cloud.raw, cloud, g_act / m)
    grad[:, core.OPACITY] += g_z / m
    return TrapResult(value, grad, per_trap, frozenset(degenerate))
