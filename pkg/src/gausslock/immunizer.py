"""Defense training: cached-teacher distillation on source scenes plus the
coupled trap on target scenes, alternated on a fixed S,S,S,S,T schedule."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container, core
from .errors import EmptyDataset, FingerprintMismatch, NonFiniteInput, NonFiniteLoss, NotUnit, ShapeMismatch
from .generator import GeneratorWeights, forward, forward_with_cache
from .optim import AdamState, OptimizerConfig, adamw_step
from .scenes import SceneDataset
from .training import BatchSampler, ParamState, config_hash, fit_loss
from .traps import TrapConfig, build_opacity_mask, coupled_trap

__all__ = [
    "DefenseConfig", "TeacherCache", "cache_teacher", "distill_loss", "adamw_step", "immunize",
    "attach_opacity_masks", "ImmunizeResult", "save_cache", "load_cache", "SCHEDULE_PERIOD", "DEFENSE_LR",
]

SCHEDULE_PERIOD = 5  # four source steps, then one target step
# A 100-step defense at the attack's 3e-5 barely moves a generator this small;
# the defense optimizer defaults to a larger step, the attack keeps 3e-5.
DEFENSE_LR = 1e-3
CACHE_MAGIC = b"GLTC"
CACHE_VERSION = 1


@dataclass(frozen=True)
class DefenseConfig:
    lambda_distill: float = 400.0
    lambda_trap: float = 20.0
    steps: int = 100
    batch_size: int = 4
    source_fraction: float = 0.8
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=DEFENSE_LR))
    trap: TrapConfig = field(default_factory=TrapConfig)
    seed: int = 0
    combined_step: bool = False

    def __post_init__(self):
        if self.lambda_distill < 0 or self.lambda_trap < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.source_fraction < 1.0:
            raise ValueError("source_fraction must lie in (0, 1)")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    def is_target_step(self, k: int) -> bool:
        """Deterministic cycle realising ``source_fraction`` (0.8 -> S,S,S,S,T)."""
        period = round(1.0 / (1.0 - self.source_fraction))
        return k % period == period - 1


# -- teacher cache ------------------------------------------------------------


@dataclass(frozen=True)
class TeacherCache:
    scene_ids: tuple
    conds: np.ndarray  # (S, d_in)
    outputs: np.ndarray  # (S, N, 14) raw teacher batches
    fingerprint: str

    def __len__(self) -> int:
        return len(self.scene_ids)

    def verify(self, teacher: GeneratorWeights) -> None:
        if teacher.fingerprint() != self.fingerprint:
            raise FingerprintMismatch("teacher weights do not match the cached fingerprint")


def cache_teacher(teacher: GeneratorWeights, source_ds: SceneDataset) -> TeacherCache:
    if len(source_ds) == 0:
        raise EmptyDataset("cannot cache teacher outputs for an empty source dataset")
    conds = source_ds.conds()
    outputs = np.stack([forward(teacher, c) for c in conds])
    return TeacherCache(tuple(source_ds.scene_ids), conds, outputs, teacher.fingerprint())


def save_cache(cache: TeacherCache, path) -> None:
    fp = bytes.fromhex(cache.fingerprint)
    s, n, ch = cache.outputs.shape
    head = struct.pack("<32sIIII", fp, s, n, ch, cache.conds.shape[1])
    sections = [(b"TCHC", head)]
    for i, sid in enumerate(cache.scene_ids):
        payload = struct.pack("<Q", sid) + np.ascontiguousarray(cache.conds[i], "<f8").tobytes() \
            + np.ascontiguousarray(cache.outputs[i], "<f8").tobytes()
        sections.append((b"BLCK", payload))
    container.write_file(path, container.pack(CACHE_MAGIC, CACHE_VERSION, sections))


def load_cache(path, teacher: GeneratorWeights | None = None) -> TeacherCache:
    """Read a cache file; if ``teacher`` is given its fingerprint must match."""
    _, sections = container.unpack(Path(path).read_bytes(), CACHE_MAGIC, CACHE_VERSION)
    tag, head = sections[0]
    if tag != b"TCHC":
        raise ValueError("teacher cache missing TCHC header section")
    fp, s, n, ch, d_in = struct.unpack("<32sIIII", head)
    ids, conds, outs = [], [], []
    for tag, payload in sections[1:]:
        (sid,) = struct.unpack_from("<Q", payload, 0)
        ids.append(sid)
        conds.append(np.frombuffer(payload, "<f8", d_in, 8))
        outs.append(np.frombuffer(payload, "<f8", n * ch, 8 + 8 * d_in).reshape(n, ch))
    if len(ids) != s:
        raise ValueError(f"teacher cache announces {s} blocks, found {len(ids)}")
    cache = TeacherCache(tuple(ids), np.array(conds), np.array(outs), fp.hex())
    if teacher is not None:
        cache.verify(teacher)
    return cache


# -- losses -------------------------------------------------------------------


def distill_loss(student_out, teacher_out) -> tuple[float, np.ndarray]:
    """Mean absolute difference over every entry; subgradient 0 at exact ties."""
    student_out = np.asarray(student_out, dtype=np.float64)
    teacher_out = np.asarray(teacher_out, dtype=np.float64)
    if student_out.shape != teacher_out.shape:
        raise ShapeMismatch(f"student {student_out.shape} vs teacher {teacher_out.shape}")
    diff = student_out - teacher_out
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def attach_opacity_masks(model: GeneratorWeights, ds: SceneDataset, topk_fraction: float) -> SceneDataset:
    """Freeze per-scene opacity masks from ``model``'s current outputs."""
    raw = forward(model, ds.conds())
    return ds.with_masks([build_opacity_mask(core.activate(r), topk_fraction) for r in raw])


def trap_batch_loss(raw: np.ndarray, masks, trap_cfg: TrapConfig) -> tuple[float, np.ndarray, dict]:
    """Mean coupled-trap value over a (B, N, 14) batch and its raw gradient."""
    b = raw.shape[0]
    grad = np.empty_like(raw)
    total = 0.0
    per = {}
    for i in range(b):
        res = coupled_trap(core.activate(raw[i]), trap_cfg, masks[i])
        total += res.value
        grad[i] = res.grad / b
        for k, v in res.per_trap.items():
            per[k] = per.get(k, 0.0) + v / b
    return total / b, grad, per


# -- training loop ------------------------------------------------------------


@dataclass
class ImmunizeResult:
    weights: GeneratorWeights
    log: list
    provenance: dict


def _defense_loop(student, cache, target_ds, cfg, target_loss, live_teacher=None, which="base"):
    if len(cache) == 0 or len(target_ds) == 0:
        raise EmptyDataset("defense needs non-empty source cache and target dataset")
    ps = ParamState(student, which, cfg.optimizer)
    src_sampler = BatchSampler(len(cache), cfg.batch_size, np.random.default_rng(np.random.SeedSequence([cfg.seed, 11])))
    tgt_sampler = BatchSampler(len(target_ds), cfg.batch_size, np.random.default_rng(np.random.SeedSequence([cfg.seed, 12])))
    tgt_conds = target_ds.conds()
    log = []
    for k in range(cfg.steps):
        kinds = ("src", "tgt") if cfg.combined_step else (("tgt",) if cfg.is_target_step(k) else ("src",))
        m = ps.model()
        flat = None
        total = 0.0
        record = {"step": k, "kind": kinds[0] if len(kinds) == 1 else "both"}
        for kind in kinds:
            if kind == "src":
                idx = src_sampler.next()
                X = cache.conds[idx]
                out, fcache = forward_with_cache(m, X)
                raw = out.reshape(len(idx), m.n_gaussians, core.N_CHANNELS)
                ref = cache.outputs[idx] if live_teacher is None else forward(live_teacher, X)
                value, g = _guarded(k, distill_loss, raw, ref)
                lam = cfg.lambda_distill
                record["distill"] = value
            else:
                idx = tgt_sampler.next()
                out, fcache = forward_with_cache(m, tgt_conds[idx])
                raw = out.reshape(len(idx), m.n_gaussians, core.N_CHANNELS)
                value, g, extra = _guarded(k, target_loss, raw, idx)
                lam = cfg.lambda_trap
                record["target_loss"] = value
                record.update(extra)
            if not np.isfinite(value):
                raise NonFiniteLoss(k, f"{kind} loss is {value}")
            total += lam * value
            gk = ps.grads(m, fcache, lam * g)
            flat = gk if flat is None else flat + gk
        record["loss"] = total
        record["grad_norm"] = ps.apply(flat)
        log.append(record)
    return ps.model(), log


def _guarded(step, fn, *args):
    # runaway outputs break the activations before the loss itself turns non-finite
    try:
        return fn(*args)
    except (NonFiniteInput, NotUnit) as e:
        raise NonFiniteLoss(step, f"outputs diverged ({e})") from None


def immunize(student: GeneratorWeights, cache: TeacherCache, target_ds: SceneDataset,
             cfg: DefenseConfig = DefenseConfig(), live_teacher: GeneratorWeights | None = None) -> ImmunizeResult:
    """Run the defense and return the immunized weights with a per-step log.

    Opacity masks are taken from ``target_ds``; scenes without one get a mask
    frozen from the initial ``student`` before the first step.
    ``live_teacher`` replaces the cache with fresh teacher forwards.
    """
    if len(target_ds) == 0:
        raise EmptyDataset("target dataset is empty")
    if any(s.mask is None for s in target_ds.samples):
        target_ds = attach_opacity_masks(student, target_ds, cfg.trap.topk_fraction)
    masks = [s.mask for s in target_ds.samples]

    def target_loss(raw, idx):
        value, g, per = trap_batch_loss(raw, [masks[i] for i in idx], cfg.trap)
        return value, g, {f"trap_{k}": v for k, v in per.items()}

    weights, log = _defense_loop(student, cache, target_ds, cfg, target_loss, live_teacher)
    provenance = {"config_hash": config_hash(cfg), "seed": cfg.seed, "method": "gausslock",
                  "teacher_fingerprint": cache.fingerprint}
    return ImmunizeResult(weights, log, provenance)


def reversed_fit_loss(raw, gt) -> tuple[float, np.ndarray]:
    """The attacker's fit loss with its sign flipped (gradient ascent on target fit)."""
    value, g = fit_loss(raw, gt)
    return -value, -g


def naive_unlearning(teacher: GeneratorWeights, cache: TeacherCache, target_ds: SceneDataset,
                     cfg: DefenseConfig = DefenseConfig(), reverse_weight: float | None = None) -> ImmunizeResult:
    """Distillation on source plus gradient ascent on the target fit loss.

    Same schedule and optimizer as :func:`immunize`; the target step minimises
    ``-fit_loss`` weighted by ``reverse_weight`` (defaults to ``cfg.lambda_trap``).
    """
    weight = cfg.lambda_trap if reverse_weight is None else reverse_weight
    gts = target_ds.cloud_arrays()

    def target_loss(raw, idx):
        return (*reversed_fit_loss(raw, gts[idx]), {})

    run_cfg = replace(cfg, lambda_trap=weight)
    weights, log = _defense_loop(teacher, cache, target_ds, run_cfg, target_loss)
    provenance = {"config_hash": config_hash(run_cfg), "seed": cfg.seed, "method": "naive-unlearning (reimpl.)",
                  "reverse_weight": weight, "teacher_fingerprint": cache.fingerprint}
    return ImmunizeResult(weights, log, provenance)


@dataclass
class Calibration:
    result: ImmunizeResult
    reverse_weight: float
    source_psnr: float
    reference_psnr: float
    history: list  # [(weight, source psnr)]
    tolerance: float = 1.0

    @property
    def matched(self) -> bool:
        return abs(self.source_psnr - self.reference_psnr) <= self.tolerance


def calibrate_naive(teacher: GeneratorWeights, cache: TeacherCache, target_ds: SceneDataset, source_eval: SceneDataset,
                    reference_psnr: float, cfg: DefenseConfig = DefenseConfig(), tolerance: float = 1.0,
                    bounds=(1e-2, 1e4), max_iter: int = 14, cameras=None) -> Calibration:
    """Bisect the reversed-loss weight (in log space) until the naive model's
    source PSNR lands within ``tolerance`` dB of ``reference_psnr``.

    Source PSNR is assumed to fall as the weight grows. If even the bounds
    cannot reach the band, the closer endpoint is returned and ``matched`` is
    False.
    """
    from .render import evaluate

    gt_cache: dict = {}
    history = []

    def run(w):
        res = naive_unlearning(teacher, cache, target_ds, cfg, reverse_weight=w)
        p = evaluate(res.weights, source_eval, cameras, gt_cache).psnr_mean
        history.append((w, p))
        return res, p

    lo, hi = np.log(bounds[0]), np.log(bounds[1])
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        res, p = run(float(np.exp(mid)))
        gap = p - reference_psnr
        if best is None or abs(gap) < abs(best[2] - reference_psnr):
            best = (res, float(np.exp(mid)), p)
        if abs(gap) <= tolerance:
            break
        if gap > 0:  # not damaging enough yet
            lo = mid
        else:
            hi = mid
    res, w, p = best
    return Calibration(res, w, p, reference_psnr, history, tolerance)


__all__ += ["naive_unlearning", "trap_batch_loss", "AdamState", "Calibration", "calibrate_naive"]
