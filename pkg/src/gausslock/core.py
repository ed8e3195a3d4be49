"""Numerical primitives on Gaussian attributes.

Raw generator output is an ``(N, 14)`` float64 array with the column layout

    0-2  position        3-5  scale         6-9  quaternion (w, x, y, z)
    10   opacity logit   11-13 color

The activated cloud uses the same column slots, so activated and raw arrays
can be compared channel by channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonConvergence, NonFiniteInput, NotUnit

N_CHANNELS = 14
POS = slice(0, 3)
SCALE = slice(3, 6)
QUAT = slice(6, 10)
OPACITY = 10
COLOR = slice(11, 14)

POSITION_BOUND = 1.0
SCALE_MIN = 1e-4
_QUAT_NORM_FLOOR = 1e-12
_OPACITY_LO = 1e-300
_OPACITY_HI = 1.0 - 1e-15

JACOBI_MAX_SWEEPS = 32


@dataclass(frozen=True)
class GaussianCloud:
    mu: np.ndarray  # (N, 3)
    s: np.ndarray  # (N, 3)
    q: np.ndarray  # (N, 4)
    o: np.ndarray  # (N,)
    c: np.ndarray  # (N, 3)
    raw: np.ndarray | None = None  # pre-activation source, when known

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    def to_array(self) -> np.ndarray:
        out = np.empty((self.n, N_CHANNELS))
        out[:, POS] = self.mu
        out[:, SCALE] = self.s
        out[:, QUAT] = self.q
        out[:, OPACITY] = self.o
        out[:, COLOR] = self.c
        return out

    @classmethod
    def from_array(cls, arr: np.ndarray) -> GaussianCloud:
        arr = np.asarray(arr, dtype=np.float64)
        return cls(
            mu=arr[:, POS].copy(),
            s=arr[:, SCALE].copy(),
            q=arr[:, QUAT].copy(),
            o=arr[:, OPACITY].copy(),
            c=arr[:, COLOR].copy(),
        )

    def permuted(self, perm: np.ndarray) -> GaussianCloud:
        raw = None if self.raw is None else self.raw[perm]
        return GaussianCloud(self.mu[perm], self.s[perm], self.q[perm], self.o[perm], self.c[perm], raw)


def check_cloud(cloud: GaussianCloud, atol: float = 1e-9) -> list[str]:
    """Return a list of violated invariants (empty when the cloud is valid)."""
    problems = []
    arr = cloud.to_array()
    if not np.all(np.isfinite(arr)):
        problems.append("non-finite entries")
    if np.any(np.abs(np.linalg.norm(cloud.q, axis=1) - 1.0) > atol):
        problems.append("quaternion not unit")
    if np.any(cloud.o <= 0.0) or np.any(cloud.o >= 1.0):
        problems.append("opacity outside (0, 1)")
    if np.any(cloud.c < 0.0) or np.any(cloud.c > 1.0):
        problems.append("color outside [0, 1]")
    if np.any(cloud.s <= 0.0):
        problems.append("non-positive scale")
    return problems


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def activate(raw: np.ndarray) -> GaussianCloud:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != N_CHANNELS or raw.shape[0] < 1:
        raise ValueError(f"raw batch must be (N, {N_CHANNELS}) with N >= 1, got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise NonFiniteInput("raw Gaussian batch contains NaN or Inf")
    mu = np.clip(raw[:, POS], -POSITION_BOUND, POSITION_BOUND)
    s = softplus(raw[:, SCALE]) + SCALE_MIN
    rq = raw[:, QUAT]
    norm = np.linalg.norm(rq, axis=1, keepdims=True)
    degenerate = norm[:, 0] < _QUAT_NORM_FLOOR
    q = rq / np.where(degenerate[:, None], 1.0, norm)
    q[degenerate] = (1.0, 0.0, 0.0, 0.0)
    o = np.clip(sigmoid(raw[:, OPACITY]), _OPACITY_LO, _OPACITY_HI)
    c = sigmoid(raw[:, COLOR])
    return GaussianCloud(mu, s, q, o, c, raw=raw)


def activation_vjp(raw: np.ndarray, cloud: GaussianCloud, g_act: np.ndarray) -> np.ndarray:
    """Pull a gradient on activated attributes back to the raw layout.

    ``g_act`` is ``(N, 14)`` in the activated column layout.
    """
    g = np.zeros_like(g_act)
    inside = np.abs(raw[:, POS]) <= POSITION_BOUND
    g[:, POS] = g_act[:, POS] * inside
    g[:, SCALE] = g_act[:, SCALE] * sigmoid(raw[:, SCALE])
    norm = np.linalg.norm(raw[:, QUAT], axis=1, keepdims=True)
    gq = g_act[:, QUAT]
    tangent = gq - cloud.q * np.sum(gq * cloud.q, axis=1, keepdims=True)
    ok = norm[:, 0] >= _QUAT_NORM_FLOOR
    g[:, QUAT] = np.where(ok[:, None], tangent / np.where(ok[:, None], norm, 1.0), 0.0)
    g[:, OPACITY] = g_act[:, OPACITY] * cloud.o * (1.0 - cloud.o)
    g[:, COLOR] = g_act[:, COLOR] * cloud.c * (1.0 - cloud.c)
    return g


# -- symmetric 3x3 eigendecomposition ---------------------------------------


@dataclass(frozen=True)
class EigenTriple:
    lambdas: np.ndarray  # (3,) descending
    vectors: np.ndarray  # (3, 3), column k pairs with lambdas[k]


def sym3_eigen(C) -> EigenTriple:
    """Cyclic Jacobi eigendecomposition of a symmetric 3x3 matrix."""
    C = np.asarray(C, dtype=np.float64)
    if C.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {C.shape}")
    if not np.all(np.isfinite(C)):
        raise NonFiniteInput("matrix contains NaN or Inf")
    a = [[float(C[i, j]) for j in range(3)] for i in range(3)]
    # symmetrise from the upper triangle so tiny asymmetries cannot leak in
    for i in range(3):
        for j in range(i):
            a[i][j] = a[j][i]
    v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    scale = math.sqrt(sum(a[i][j] ** 2 for i in range(3) for j in range(3)))
    tol = 1e-300 if scale == 0.0 else scale * 1e-17

    converged = False
    for _ in range(JACOBI_MAX_SWEEPS):
        off = a[0][1] ** 2 + a[0][2] ** 2 + a[1][2] ** 2
        if math.sqrt(off) <= tol:
            converged = True
            break
        for p, r in ((0, 1), (0, 2), (1, 2)):
            apq = a[p][r]
            if apq == 0.0:
                continue
            theta = (a[r][r] - a[p][p]) / (2.0 * apq)
            t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
            cs = 1.0 / math.sqrt(t * t + 1.0)
            sn = t * cs
            for k in range(3):
                akp, akr = a[k][p], a[k][r]
                a[k][p] = cs * akp - sn * akr
                a[k][r] = sn * akp + cs * akr
            for k in range(3):
                apk, ark = a[p][k], a[r][k]
                a[p][k] = cs * apk - sn * ark
                a[r][k] = sn * apk + cs * ark
            for k in range(3):
                vkp, vkr = v[k][p], v[k][r]
                v[k][p] = cs * vkp - sn * vkr
                v[k][r] = sn * vkp + cs * vkr
    if not converged:
        off = a[0][1] ** 2 + a[0][2] ** 2 + a[1][2] ** 2
        if math.sqrt(off) > max(tol, scale * 1e-14):
            raise NonConvergence(f"Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps")

    lam = np.array([a[0][0], a[1][1], a[2][2]])
    vec = np.array(v)
    order = np.argsort(-lam, kind="stable")
    lam = lam[order]
    vec = vec[:, order]
    for k in range(3):
        col = vec[:, k]
        if col[np.argmax(np.abs(col))] < 0:
            vec[:, k] = -col
    return EigenTriple(lam, vec)


# -- rotations and second-moment tensors ------------------------------------


def quat_to_axis(q) -> np.ndarray:
    """Third column of R(q), i.e. the rotated z axis. Accepts (4,) or (N, 4)."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q2 = np.atleast_2d(q)
    norms = np.linalg.norm(q2, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise NotUnit(f"quaternion norm deviates from 1 (max dev {np.max(np.abs(norms - 1.0)):.3g})")
    w, x, y, z = q2.T
    r = np.stack([2.0 * (x * z + w * y), 2.0 * (y * z - w * x), 1.0 - 2.0 * (x * x + y * y)], axis=1)
    return r[0] if single else r


def quat_axis_jacobian(q: np.ndarray) -> np.ndarray:
    """d r / d q for r = quat_to_axis(q); shape (N, 3, 4)."""
    w, x, y, z = np.asarray(q, dtype=np.float64).T
    zero = np.zeros_like(w)
    return np.stack(
        [
            np.stack([2 * y, 2 * z, 2 * w, 2 * x], axis=1),
            np.stack([-2 * x, -2 * w, 2 * z, 2 * y], axis=1),
            np.stack([zero, -4 * x, -4 * y, zero], axis=1),
        ],
        axis=1,
    )


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions (N, 4) -> (N, 3, 3)."""
    w, x, y, z = np.asarray(q, dtype=np.float64).T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=1),
        ],
        axis=1,
    )


def centralized_covariance(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] < 1:
        raise ValueError(f"expected (N, 3) points with N >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("points contain NaN or Inf")
    d = x - x.mean(axis=0)
    C = d.T @ d / x.shape[0]
    return 0.5 * (C + C.T)


def structure_tensor(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != 3 or r.shape[0] < 1:
        raise ValueError(f"expected (N, 3) axes with N >= 1, got {r.shape}")
    if np.any(np.abs(np.linalg.norm(r, axis=1) - 1.0) > 1e-6):
        raise NotUnit("structure tensor rows must be unit vectors")
    T = r.T @ r / r.shape[0]
    return 0.5 * (T + T.T)
