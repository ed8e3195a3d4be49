"""Simulated adversary: LoRA or full-parameter fine-tuning on target scenes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lora, render
from .errors import EmptyDataset
from .generator import GeneratorWeights, save_checkpoint
from .optim import OptimizerConfig
from .scenes import SceneDataset
from .training import config_hash, mean_fit, train_regression

__all__ = ["AttackConfig", "AttackResult", "attack", "attack_grid", "save_attack", "trainable_params"]


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "lora"  # or "full"
    steps: int = 400
    batch_size: int = 4
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    rank: int = 16
    alpha: float = 16.0
    dropout: float = 0.1
    snapshot_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("lora", "full"):
            raise ValueError(f"attack mode must be 'lora' or 'full', got {self.mode!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")

    def hash(self) -> str:
        return config_hash(self)


@dataclass
class AttackResult:
    config: AttackConfig
    snapshots: list  # [(step, GeneratorWeights)], step 0 included
    log: list

    @property
    def config_hash(self) -> str:
        return self.config.hash()


def attack(checkpoint: GeneratorWeights, target_ds: SceneDataset, cfg: AttackConfig = AttackConfig()) -> AttackResult:
    """Fine-tune ``checkpoint`` on ``target_ds`` by channelwise L1 regression.

    In lora mode fresh adapters are injected (seeded by ``cfg.seed``) and only
    they train, with dropout active; in full mode every base weight trains.
    """
    if len(target_ds) == 0:
        raise EmptyDataset("attack needs a non-empty target dataset")
    base = checkpoint.without_adapters()
    if cfg.mode == "lora":
        model = lora.inject(base, cfg.rank, cfg.alpha, cfg.dropout, seed=cfg.seed)
        which, train_mode = "adapters", True
    else:
        model, which, train_mode = base, "base", False
    res = train_regression(model, target_ds.conds(), target_ds.cloud_arrays(), cfg.steps, cfg.optimizer, cfg.seed,
                           which=which, batch_size=cfg.batch_size, snapshot_every=cfg.snapshot_every,
                           train_mode=train_mode)
    return AttackResult(cfg, res.snapshots, res.log)


def trainable_params(checkpoint: GeneratorWeights, cfg: AttackConfig) -> int:
    if cfg.mode == "full":
        return sum(p.size for p in checkpoint.params().values())
    probe = lora.inject(checkpoint.without_adapters(), cfg.rank, cfg.alpha, cfg.dropout, seed=cfg.seed)
    return lora.trainable_count(probe)


def save_attack(result: AttackResult, out_dir) -> list[Path]:
    """Write snapshots as ``attack_<hash>_step<k>`` checkpoints plus a JSON-lines log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = result.config_hash
    paths = []
    for step, w in result.snapshots:
        p = out / f"attack_{h}_step{step}"
        save_checkpoint(w, p)
        paths.append(p)
    with open(out / f"attack_{h}.log.jsonl", "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return paths


def attack_grid(checkpoint: GeneratorWeights, target_ds: SceneDataset, grid, eval_ds: SceneDataset | None = None,
                cameras=None) -> list[dict]:
    """One row per (config, snapshot step) with PSNR on ``eval_ds`` (default: ``target_ds``)."""
    grid = list(grid)
    if not grid:
        raise ValueError("attack grid is empty")
    eval_ds = target_ds if eval_ds is None else eval_ds
    gt_cache: dict = {}
    conds, clouds = eval_ds.conds(), eval_ds.cloud_arrays()
    rows = []
    for cfg in grid:
        res = attack(checkpoint, target_ds, cfg)
        n_train = trainable_params(checkpoint, cfg)
        for step, w in res.snapshots:
            table = render.evaluate(w, eval_ds, cameras, gt_cache)
            rows.append({
                "config_hash": res.config_hash, "mode": cfg.mode, "optimizer": cfg.optimizer.name,
                "lr": cfg.optimizer.lr, "rank": cfg.rank if cfg.mode == "lora" else None,
                "trainable_params": n_train, "step": step, "target_psnr": table.psnr_mean,
                "fit_loss": mean_fit(w, conds, clouds), "collapse": table.collapse_mean(),
            })
    return rows


def psnr_trajectory(result: AttackResult, eval_ds: SceneDataset, cameras=None, gt_cache=None) -> np.ndarray:
    """Mean target PSNR at each snapshot of ``result``."""
    gt_cache = {} if gt_cache is None else gt_cache
    return np.array([render.evaluate(w, eval_ds, cameras, gt_cache).psnr_mean for _, w in result.snapshots])


__all__ += ["psnr_trajectory"]
