"""Procedural scene families and the benchmark splits built from them.

Every family maps the same fixed set of 256 surface coordinates ``(u_i, v_i)``
onto its surface, so Gaussian ``i`` plays a comparable role in every scene.
That keeps channel-wise regression well posed across scenes and families.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import container
from .core import N_CHANNELS, GaussianCloud, check_cloud
from .errors import UnknownFamily
from .generator import D_IN, N_GAUSSIANS
from .traps import OpacityMask

FAMILIES = ("sphere", "box", "torus", "blob")
N_PARAMS = 8
TANGENT_SCALE = 0.7
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

# Family part of the conditioning vector: (target category, round style,
# angular style, 0). Target families share the category flag and borrow a
# style from a source family, the way one object category can look alike
# across datasets.
FAMILY_CODES = {
    "sphere": (0.0, 1.0, 0.0, 0.0),
    "box": (0.0, 0.0, 1.0, 0.0),
    "torus": (1.0, 0.0, 1.0, 0.0),
    "blob": (1.0, 1.0, 0.0, 0.0),
}
# The category flag is the strongest cue in the vector, the way a whole object
# category dominates an image; source scenes leave it at zero.
CATEGORY_GAIN = 300.0

PALETTES = {
    "sphere": (0.40, 0.18, 0.14),
    "box": (0.16, 0.22, 0.42),
    "torus": (0.18, 0.34, 0.16),
    "blob": (0.38, 0.30, 0.12),
}

DS_MAGIC = b"GLDS"
DS_VERSION = 1
_DOMAIN_CODES = {"source": 0, "target": 1}


def surface_coords(n: int = N_GAUSSIANS) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(n)
    u = (i + 0.5) / n
    v = np.mod(i * _GOLDEN, 1.0)
    return u, v


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _frames_to_quats(normals: np.ndarray, twist: float = 0.0) -> np.ndarray:
    """Unit quaternions (w >= 0) whose rotation sends e_z to each normal.

    ``twist`` turns the tangent axes about the normal by that angle.
    """
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, np.array([[0.0, 0.0, 1.0]]), np.array([[1.0, 0.0, 0.0]]))
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    if twist:
        c, sn = math.cos(twist), math.sin(twist)
        t1, t2 = c * t1 + sn * t2, c * t2 - sn * t1
    R = np.stack([t1, t2, n], axis=2)  # columns
    return _rotmat_to_quat(R)


def _rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    out = np.empty((R.shape[0], 4))
    for k, m in enumerate(R):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = 2.0 * math.sqrt(tr + 1.0)
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        q = np.array(q)
        q /= np.linalg.norm(q)
        out[k] = q if q[0] >= 0 else -q
    return out


# -- scene parameters -------------------------------------------------------

# Every family reads the same 8 normalized parameters in [-1, 1]:
#   0-2 size parameters, 3 yaw, 4 tilt, 5 hue shift, 6 pattern phase, 7 opacity phase


def sample_params(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=N_PARAMS)


def _lerp(p, lo, hi):
    return lo + (hi - lo) * (p + 1.0) / 2.0


def synth_scene(family: str, params=None, seed: int = 0, n: int = N_GAUSSIANS, radius: float | None = None) -> GaussianCloud:
    """Ground-truth cloud for one scene; missing params are drawn from ``seed``.

    ``radius`` pins the sphere radius (handy for constructive checks).
    """
    if family not in FAMILIES:
        raise UnknownFamily(f"unknown scene family {family!r}; known: {', '.join(FAMILIES)}")
    p = sample_params(np.random.default_rng(seed)) if params is None else np.asarray(params, dtype=np.float64)
    if p.shape != (N_PARAMS,):
        raise ValueError(f"expected {N_PARAMS} scene parameters")
    u, v = surface_coords(n)
    theta = 2.0 * math.pi * u
    phi = 2.0 * math.pi * v
    zc = 1.0 - 2.0 * u
    ring = np.sqrt(np.clip(1.0 - zc * zc, 0.0, None))
    sphere_dir = np.stack([ring * np.cos(phi), ring * np.sin(phi), zc], axis=1)
    twist, stretch = 0.0, 1.0

    if family == "sphere":
        r = _lerp(p[0], 0.55, 0.8) if radius is None else radius
        pts = r * sphere_dir
        normals = sphere_dir
        area = 4.0 * math.pi * r * r
    elif family == "box":
        ext = np.array([_lerp(p[0], 0.45, 0.65), _lerp(p[1], 0.45, 0.65), _lerp(p[2], 0.45, 0.65)])
        ratios = np.abs(sphere_dir) / ext
        face = np.argmax(ratios, axis=1)
        t = 1.0 / ratios[np.arange(n), face]
        pts = sphere_dir * t[:, None]
        normals = np.zeros_like(pts)
        normals[np.arange(n), face] = np.sign(sphere_dir[np.arange(n), face])
        area = 8.0 * (ext[0] * ext[1] + ext[1] * ext[2] + ext[0] * ext[2])
    elif family == "torus":
        big = _lerp(p[0], 0.5, 0.65)
        small = _lerp(p[1], 0.2, 0.3)
        cp, sp = np.cos(phi), np.sin(phi)
        pts = np.stack([(big + small * cp) * np.cos(theta), (big + small * cp) * np.sin(theta), small * sp], axis=1)
        normals = np.stack([cp * np.cos(theta), cp * np.sin(theta), sp], axis=1)
        area = 4.0 * math.pi**2 * big * small
    else:  # blob
        r0 = _lerp(p[0], 0.5, 0.7)
        amp = _lerp(p[1], 0.08, 0.18)
        bump = (np.sin(3.0 * theta + 2.0 * p[2]) * np.cos(2.0 * phi) + 0.5 * np.cos(4.0 * phi + p[2])) / 1.5
        rad = r0 * (1.0 + amp * bump)
        pts = rad[:, None] * sphere_dir
        normals = sphere_dir
        # blob splats are longer and lie across the sphere's tangent frame
        twist, stretch = 0.5 * math.pi, 1.6
        area = 4.0 * math.pi * r0 * r0

    rot = _rot_z(math.pi * p[3]) @ _rot_x(0.5 * math.pi * p[4])
    mu = pts @ rot.T
    normals = normals @ rot.T

    tangent = TANGENT_SCALE * math.sqrt(area / n)
    s = np.empty((n, 3))
    s[:, 0] = tangent * (1.0 + 0.15 * np.cos(2.0 * math.pi * v))
    s[:, 1] = tangent
    s[:, 2] = 0.2 * tangent
    s[:, 0] *= stretch
    q = _frames_to_quats(normals, twist)

    # one opacity level per scene
    o = np.full(n, _lerp(p[7], 0.7, 0.95))

    base = np.array(PALETTES[family])
    hue = 0.12 * p[5]
    pattern = np.stack(
        [
            np.cos(2.0 * math.pi * (2.0 * v + 0.5 * p[6])),
            np.cos(2.0 * math.pi * (3.0 * u + 0.5 * p[6])),
            np.sin(2.0 * math.pi * (u + v)),
        ],
        axis=1,
    )
    c = np.clip(base + np.array([hue, -hue, 0.5 * hue]) + 0.1 * pattern, 0.03, 0.97)
    return GaussianCloud(mu, s, q, o, c)


# fixed random features of the latent fill the remaining inputs
_PROJ = np.random.default_rng(20240601).normal(0.0, 1.0 / math.sqrt(N_PARAMS), size=(D_IN - 4 - N_PARAMS, N_PARAMS))


def conditioning(family: str, params: np.ndarray) -> np.ndarray:
    if family not in FAMILY_CODES:
        raise UnknownFamily(f"unknown scene family {family!r}")
    p = np.asarray(params, dtype=np.float64)
    code = np.array(FAMILY_CODES[family])
    code[0] *= CATEGORY_GAIN
    return np.concatenate([code, p, np.tanh(_PROJ @ p)])


# -- datasets -----------------------------------------------------------------


@dataclass(frozen=True)
class SceneSample:
    scene_id: int
    cond: np.ndarray
    cloud: GaussianCloud
    mask: OpacityMask | None = None


@dataclass(frozen=True)
class SceneDataset:
    samples: tuple
    domain_tag: str
    family: str
    seed: int

    def __post_init__(self):
        ids = [s.scene_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("scene ids must be unique")
        if self.domain_tag not in _DOMAIN_CODES:
            raise ValueError(f"domain_tag must be 'source' or 'target', got {self.domain_tag!r}")

    def __len__(self) -> int:
        return len(self.samples)

    def conds(self) -> np.ndarray:
        return np.stack([s.cond for s in self.samples])

    def cloud_arrays(self) -> np.ndarray:
        return np.stack([s.cloud.to_array() for s in self.samples])

    @property
    def scene_ids(self) -> list[int]:
        return [s.scene_id for s in self.samples]

    def with_masks(self, masks) -> SceneDataset:
        samples = tuple(replace(s, mask=m) for s, m in zip(self.samples, masks, strict=True))
        return replace(self, samples=samples)

    def subset(self, indices) -> SceneDataset:
        return replace(self, samples=tuple(self.samples[i] for i in indices))


def _scene_seed(seed: int, family: str, i: int) -> int:
    ss = np.random.SeedSequence([seed, FAMILIES.index(family), i])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def _make_scenes(family: str, count: int, seed: int, id_base: int) -> list[SceneSample]:
    out = []
    for i in range(count):
        sseed = _scene_seed(seed, family, id_base + i)
        params = sample_params(np.random.default_rng(sseed))
        cloud = synth_scene(family, params, sseed)
        sid = (FAMILIES.index(family) << 32) | (id_base + i)
        out.append(SceneSample(sid, conditioning(family, params), cloud))
    return out


def make_source(seed: int, count: int = 40, id_base: int = 0) -> SceneDataset:
    half = count // 2
    spheres = _make_scenes("sphere", count - half, seed, id_base)
    boxes = _make_scenes("box", half, seed, id_base)
    mixed = [s for pair in zip(spheres, boxes) for s in pair] + spheres[len(boxes):]
    return SceneDataset(tuple(mixed), "source", "sphere+box", seed)


def make_holdout_source(seed: int, count: int = 10) -> SceneDataset:
    """Source-family scenes disjoint from :func:`make_source` (id offset 1_000_000)."""
    return make_source(seed, count, id_base=1_000_000)


def make_pretrain_pool(seed: int, count: int = 2000) -> SceneDataset:
    """Large source-family pool for teacher pretraining (id offset 5_000_000)."""
    return make_source(seed, count, id_base=5_000_000)


def make_benchmark(protocol: str, seed: int) -> tuple[SceneDataset, SceneDataset, SceneDataset]:
    """(source, defense target, attack target) datasets for one protocol."""
    source = make_source(seed, 40)
    if protocol == "ideal":
        pool = _make_scenes("torus", 50, seed, 0)
        perm = np.random.default_rng(np.random.SeedSequence([seed, 404])).permutation(len(pool))
        n_def = round(0.4 * len(pool))
        defense = [pool[i] for i in sorted(perm[:n_def])]
        attack = [pool[i] for i in sorted(perm[n_def:])]
        return (
            source,
            SceneDataset(tuple(defense), "target", "torus", seed),
            SceneDataset(tuple(attack), "target", "torus", seed),
        )
    if protocol == "shifted":
        defense = _make_scenes("torus", 20, seed, 0)
        attack = _make_scenes("blob", 30, seed, 0)
        return (
            source,
            SceneDataset(tuple(defense), "target", "torus", seed),
            SceneDataset(tuple(attack), "target", "blob", seed),
        )
    raise ValueError(f"unknown protocol {protocol!r}; expected 'ideal' or 'shifted'")


def validate_dataset(ds: SceneDataset) -> None:
    for s in ds.samples:
        problems = check_cloud(s.cloud)
        if problems:
            raise ValueError(f"scene {s.scene_id}: {', '.join(problems)}")


# -- GLDS container ---------------------------------------------------------


def dataset_bytes(ds: SceneDataset) -> bytes:
    fam = ds.family.encode("utf-8")
    n_gauss = ds.samples[0].cloud.n if ds.samples else N_GAUSSIANS
    d_in = ds.samples[0].cond.size if ds.samples else D_IN
    head = struct.pack(f"<BQI{len(fam)}sIII", _DOMAIN_CODES[ds.domain_tag], ds.seed, len(fam), fam,
                       len(ds.samples), n_gauss, d_in)
    sections = [(b"HEAD", head)]
    for s in ds.samples:
        idx = np.zeros(0, dtype="<u4") if s.mask is None else s.mask.indices.astype("<u4")
        payload = b"".join([
            struct.pack("<Q", s.scene_id),
            np.ascontiguousarray(s.cond, dtype="<f8").tobytes(),
            np.ascontiguousarray(s.cloud.to_array(), dtype="<f8").tobytes(),
            struct.pack("<I", idx.size),
            idx.tobytes(),
        ])
        sections.append((b"SMPL", payload))
    return container.pack(DS_MAGIC, DS_VERSION, sections)


def dataset_from_bytes(data: bytes) -> SceneDataset:
    _, sections = container.unpack(data, DS_MAGIC, DS_VERSION)
    tag, head = sections[0]
    if tag != b"HEAD":
        raise ValueError("dataset container missing HEAD section")
    domain, seed, flen = struct.unpack_from("<BQI", head, 0)
    off = struct.calcsize("<BQI")
    family = head[off : off + flen].decode("utf-8")
    n_samples, n_gauss, d_in = struct.unpack_from("<III", head, off + flen)
    domain_tag = {v: k for k, v in _DOMAIN_CODES.items()}[domain]
    samples = []
    for tag, payload in sections[1:]:
        if tag != b"SMPL":
            continue
        (sid,) = struct.unpack_from("<Q", payload, 0)
        off = 8
        cond = np.frombuffer(payload, "<f8", d_in, off).astype(np.float64)
        off += 8 * d_in
        arr = np.frombuffer(payload, "<f8", n_gauss * N_CHANNELS, off).reshape(n_gauss, N_CHANNELS)
        off += 8 * n_gauss * N_CHANNELS
        (k,) = struct.unpack_from("<I", payload, off)
        off += 4
        mask = None
        if k:
            mask = OpacityMask(np.frombuffer(payload, "<u4", k, off).astype(np.int64))
        samples.append(SceneSample(sid, cond, GaussianCloud.from_array(arr), mask))
    if len(samples) != n_samples:
        raise ValueError(f"dataset header announces {n_samples} samples, found {len(samples)}")
    return SceneDataset(tuple(samples), domain_tag, family, seed)


def save_dataset(ds: SceneDataset, path) -> None:
    container.write_file(path, dataset_bytes(ds))


def load_dataset(path) -> SceneDataset:
    return dataset_from_bytes(Path(path).read_bytes())
