"""Forward-only orthographic splatting, PSNR, and collapse diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import core
from .generator import forward
from .traps import OpacityMask, build_opacity_mask

ALPHA_MAX = 0.999
FOOTPRINT_FLOOR_PX = 0.3
PSNR_CAP = 99.0
VISIBLE_OPACITY = 1e-6

# view -> (forward, right, up); the camera sits on the +view side looking along "forward"
_VIEWS = {
    "+x": ((-1, 0, 0), (0, 1, 0), (0, 0, 1)),
    "-x": ((1, 0, 0), (0, -1, 0), (0, 0, 1)),
    "+y": ((0, -1, 0), (-1, 0, 0), (0, 0, 1)),
    "-y": ((0, 1, 0), (1, 0, 0), (0, 0, 1)),
    "+z": ((0, 0, -1), (1, 0, 0), (0, 1, 0)),
    "-z": ((0, 0, 1), (-1, 0, 0), (0, 1, 0)),
}
VIEW_NAMES = tuple(_VIEWS)

CSV_COLUMNS = ("scene_id", "view", "psnr_db", "pos_cond", "scale_aniso", "rot_coherence", "color_cond",
               "opa_median", "opa_p95", "opa_masked_mean")


@dataclass(frozen=True)
class Camera:
    view: str = "+z"
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.view not in _VIEWS:
            raise ValueError(f"unknown view {self.view!r}")
        if self.width < 8 or self.height < 8:
            raise ValueError("image size must be at least 8x8")

    def basis(self) -> np.ndarray:
        return np.array(_VIEWS[self.view], dtype=np.float64)


def default_cameras(size: int = 64) -> list[Camera]:
    return [Camera(v, size, size) for v in VIEW_NAMES]


def splat_render(cloud: core.GaussianCloud, cam: Camera) -> np.ndarray:
    """Render to an (H, W, 3) image in [0, 1] over a white background."""
    fwd, right, up = cam.basis()
    W, H = cam.width, cam.height
    sx, sy = W / 2.0, H / 2.0
    depth = cloud.mu @ fwd
    # total order: depth, then the attributes themselves, then input index, so
    # equal-depth Gaussians (common at the position clamp) sort the same way
    # whatever the input order. Everything below runs on the sorted arrays.
    attrs = np.hstack([cloud.mu, cloud.s, cloud.q, cloud.o[:, None], cloud.c])
    first = np.lexsort((np.arange(cloud.n), *attrs.T[::-1], depth))
    mu, o, col = cloud.mu[first], cloud.o[first], cloud.c[first]
    order = np.arange(cloud.n)

    px = (mu @ right + 1.0) * sx - 0.5
    py = (1.0 - mu @ up) * sy - 0.5

    R = core.quat_to_rotmat(cloud.q[first])
    cov3 = np.einsum("nij,nj,nkj->nik", R, cloud.s[first] ** 2, R)
    P = np.stack([right * sx, -up * sy])  # pixel-space projection (2, 3)
    cov2 = np.einsum("ai,nij,bj->nab", P, cov3, P)
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    # floor the footprint eigenvalues
    mean = 0.5 * (a + c)
    rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    l1 = np.maximum(mean + rad, FOOTPRINT_FLOOR_PX**2)
    l2 = np.maximum(mean - rad, FOOTPRINT_FLOOR_PX**2)
    theta = 0.5 * np.arctan2(2.0 * b, a - c)
    ct, st = np.cos(theta), np.sin(theta)
    # inverse = V diag(1/l) V^T with V = [[ct, -st], [st, ct]]
    ia = ct * ct / l1 + st * st / l2
    ib = ct * st * (1.0 / l1 - 1.0 / l2)
    ic = st * st / l1 + ct * ct / l2

    # Gaussians this faint cannot move an 8-bit pixel; skipping them keeps
    # collapsed (transparent) clouds cheap to render.
    order = order[o >= VISIBLE_OPACITY]
    if order.size == 0:
        return np.ones((H, W, 3))
    f32 = np.float32
    xs = np.arange(W, dtype=f32)
    ys = np.arange(H, dtype=f32)
    dx = xs[None, None, :] - px[order, None, None].astype(f32)
    dy = ys[None, :, None] - py[order, None, None].astype(f32)
    ia = ia[order, None, None].astype(f32)
    ib = ib[order, None, None].astype(f32)
    ic = ic[order, None, None].astype(f32)
    power = (ia * dx * dx + ic * dy * dy) + (2.0 * ib) * dx * dy
    power *= f32(-0.5)
    alpha = np.exp(power, out=power)
    alpha *= o[order, None, None].astype(f32)
    np.clip(alpha, 0.0, ALPHA_MAX, out=alpha)
    alpha = alpha.reshape(order.size, H * W)

    trans = np.cumprod(1.0 - alpha, axis=0, dtype=f32)
    weight = alpha
    weight[1:] *= trans[:-1]
    img = weight.T.astype(np.float64) @ col[order] + trans[-1][:, None].astype(np.float64)
    return np.clip(img, 0.0, 1.0).reshape(H, W, 3)


def psnr(img, ref) -> float:
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"shape mismatch {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def write_ppm(img, path) -> None:
    """Binary P6, 8 bits per channel."""
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, off = [], 0
    while len(tokens) < 4:
        while data[off : off + 1].isspace():
            off += 1
        if data[off : off + 1] == b"#":
            off = data.index(b"\n", off) + 1
            continue
        end = off
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[off:end])
        off = end
    if tokens[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pix = np.frombuffer(data, np.uint8, w * h * 3, off + 1).reshape(h, w, 3)
    return pix.astype(np.float64) / maxval


# -- collapse diagnostics ---------------------------------------------------


@dataclass(frozen=True)
class CollapseReport:
    pos_cond: float
    scale_aniso: float
    rot_coherence: float
    color_cond: float
    opa_median: float
    opa_p95: float
    opa_masked_mean: float

    def as_dict(self) -> dict:
        return asdict(self)


def _cond(C: np.ndarray) -> float:
    lam = core.sym3_eigen(C).lambdas
    lmax, lmin = lam[0], max(lam[2], 0.0)
    if lmax <= 0.0:
        return 1.0
    if lmin == 0.0:
        return math.inf
    return max(1.0, lmax / lmin)


def collapse_report(cloud: core.GaussianCloud, mask: OpacityMask | None = None) -> CollapseReport:
    if cloud.n < 2:
        raise ValueError("collapse report needs at least two Gaussians")
    if mask is None:
        mask = build_opacity_mask(cloud)
    u = cloud.s**2
    T = core.structure_tensor(core.quat_to_axis(cloud.q))
    lam_t = core.sym3_eigen(T).lambdas
    return CollapseReport(
        pos_cond=_cond(core.centralized_covariance(cloud.mu)),
        scale_aniso=float(np.mean(u.max(axis=1) / u.min(axis=1))),
        rot_coherence=float(min(1.0, max(1.0 / 3.0, lam_t[0] / np.trace(T)))),
        color_cond=_cond(core.centralized_covariance(cloud.c)),
        opa_median=float(np.median(cloud.o)),
        opa_p95=float(np.percentile(cloud.o, 95)),
        opa_masked_mean=float(np.mean(cloud.o[mask.indices])),
    )


# -- evaluation ---------------------------------------------------------------


@dataclass
class EvalTable:
    rows: list  # dicts keyed by CSV_COLUMNS
    psnr_mean: float
    psnr_std: float
    scene_psnr: dict  # scene_id -> mean PSNR over views

    def collapse_mean(self) -> dict:
        keys = CSV_COLUMNS[3:]
        return {k: float(np.mean([r[k] for r in self.rows])) for k in keys}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in self.rows:
                writer.writerow([r["scene_id"], r["view"]] + [repr(float(r[k])) for k in CSV_COLUMNS[2:]])


def evaluate(model, dataset, cameras=None, gt_cache: dict | None = None) -> EvalTable:
    """Render generated vs ground-truth clouds per scene and view.

    ``model`` is a :class:`GeneratorWeights` (adapters applied in eval mode).
    ``gt_cache`` memoises ground-truth renders across calls.
    """
    cameras = default_cameras() if cameras is None else list(cameras)
    if gt_cache is None:
        gt_cache = {}
    raw = forward(model, dataset.conds())
    rows, scene_psnr = [], {}
    for sample, r in zip(dataset.samples, raw):
        cloud = core.activate(r)
        report = collapse_report(cloud, sample.mask)
        vals = []
        for cam in cameras:
            key = (sample.scene_id, cam)
            ref = gt_cache.get(key)
            if ref is None:
                ref = gt_cache[key] = splat_render(sample.cloud, cam)
            p = psnr(splat_render(cloud, cam), ref)
            vals.append(p)
            rows.append({"scene_id": sample.scene_id, "view": cam.view, "psnr_db": p, **report.as_dict()})
        scene_psnr[sample.scene_id] = float(np.mean(vals))
    all_p = [r["psnr_db"] for r in rows]
    return EvalTable(rows, float(np.mean(all_p)), float(np.std(all_p)), scene_psnr)
