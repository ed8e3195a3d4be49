"""End-to-end protocol runs: teacher pretraining, defenses, attacks, and the
per-snapshot comparison table shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import render
from .attack import AttackConfig, attack
from .generator import GeneratorWeights, init_weights
from .immunizer import DefenseConfig, cache_teacher, calibrate_naive, immunize
from .optim import OptimizerConfig
from .scenes import SceneDataset, make_benchmark, make_holdout_source, make_pretrain_pool
from .training import train_regression

BASELINE = "baseline"
NAIVE = "naive-unlearning (reimpl.)"
GAUSSLOCK = "gausslock"


@dataclass(frozen=True)
class TeacherRecipe:
    steps: int = 4000
    pool_size: int = 2000
    batch_size: int = 4
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=1e-3, weight_decay=1.0))


def pretrain_teacher(seed: int, recipe: TeacherRecipe = TeacherRecipe(), pool: SceneDataset | None = None) -> GeneratorWeights:
    """Regress a freshly initialised generator onto source-family clouds."""
    pool = make_pretrain_pool(seed, recipe.pool_size) if pool is None else pool
    res = train_regression(init_weights(seed=seed), pool.conds(), pool.cloud_arrays(), recipe.steps,
                           recipe.optimizer, seed, batch_size=recipe.batch_size)
    return res.snapshots[-1][1]


@dataclass(frozen=True)
class EvalSettings:
    n_views: int = 3
    n_scenes: int = 8

    def cameras(self):
        return render.default_cameras()[: self.n_views]

    def subset(self, ds: SceneDataset) -> SceneDataset:
        return ds.subset(range(min(self.n_scenes, len(ds))))


@dataclass
class ProtocolRun:
    protocol: str
    seed: int
    teacher: GeneratorWeights
    defended: dict  # method name -> weights
    source_psnr: dict  # method name -> held-out source PSNR
    source_l1: dict  # method name -> mean |raw - cached teacher| on the source cache
    trajectories: dict = field(default_factory=dict)  # (method, attack label) -> [(step, psnr)]
    extras: dict = field(default_factory=dict)


def source_l1(model: GeneratorWeights, cache) -> float:
    from .generator import forward

    return float(np.mean(np.abs(forward(model, cache.conds) - cache.outputs)))


def run_protocol(protocol: str, seed: int, defense: DefenseConfig | None = None, teacher: GeneratorWeights | None = None,
                 attacks: dict | None = None, settings: EvalSettings = EvalSettings(), with_naive: bool = True,
                 recipe: TeacherRecipe = TeacherRecipe()) -> ProtocolRun:
    """Train (or reuse) a teacher, defend it, then attack every defended model.

    ``attacks`` maps a label to an :class:`AttackConfig`; the default is the
    LoRA and full-parameter pair at the reference settings.
    """
    defense = replace(DefenseConfig(), seed=seed) if defense is None else defense
    attacks = default_attacks(seed) if attacks is None else attacks
    source, defense_tgt, attack_tgt = make_benchmark(protocol, seed)
    holdout = make_holdout_source(seed)
    teacher = pretrain_teacher(seed, recipe) if teacher is None else teacher
    cache = cache_teacher(teacher, source)
    cams = settings.cameras()
    src_cache: dict = {}

    defended = {BASELINE: teacher}
    gl = immunize(teacher, cache, defense_tgt, defense)
    defended[GAUSSLOCK] = gl.weights
    source_psnr = {name: render.evaluate(w, holdout, cams, src_cache).psnr_mean for name, w in defended.items()}
    extras = {"gausslock_log": gl.log}
    if with_naive:
        cal = calibrate_naive(teacher, cache, defense_tgt, holdout, source_psnr[GAUSSLOCK], defense, cameras=cams)
        defended[NAIVE] = cal.result.weights
        source_psnr[NAIVE] = cal.source_psnr
        extras["naive_calibration"] = cal
    l1 = {name: source_l1(w, cache) for name, w in defended.items()}

    run = ProtocolRun(protocol, seed, teacher, defended, source_psnr, l1, extras=extras)
    add_attacks(run, attacks, settings)
    return run


def add_attacks(run: ProtocolRun, attacks: dict, settings: EvalSettings = EvalSettings()) -> ProtocolRun:
    """Attack every defended model of ``run`` and store the target PSNR trajectories."""
    _, _, attack_tgt = make_benchmark(run.protocol, run.seed)
    ev = settings.subset(attack_tgt)
    cams = settings.cameras()
    tgt_cache = run.extras.setdefault("target_renders", {})
    for label, cfg in attacks.items():
        for name, w in run.defended.items():
            res = attack(w, attack_tgt, cfg)
            run.trajectories[(name, label)] = [(s, render.evaluate(m, ev, cams, tgt_cache).psnr_mean)
                                               for s, m in res.snapshots]
    return run


def default_attacks(seed: int) -> dict:
    return {"lora": AttackConfig(mode="lora", seed=seed), "full": AttackConfig(mode="full", seed=seed)}


def gaps(run: ProtocolRun, label: str, steps=(100, 200, 300, 400)) -> np.ndarray:
    """Baseline minus GaussLock target PSNR at each snapshot step."""
    base = dict(run.trajectories[(BASELINE, label)])
    gl = dict(run.trajectories[(GAUSSLOCK, label)])
    return np.array([base[s] - gl[s] for s in steps])
