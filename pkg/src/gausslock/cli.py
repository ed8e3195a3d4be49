"""Command-line pipeline: data generation, teacher training, immunization,
attacks, evaluation and the comparison report.

Exit codes: 0 success, 2 validation error, 3 non-finite loss abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, render
from .attack import AttackConfig, attack, save_attack
from .container import file_sha256
from .errors import ConfigError, GaussLockError, NonFiniteLoss
from .experiment import BASELINE, GAUSSLOCK, NAIVE, EvalSettings, TeacherRecipe, pretrain_teacher
from .generator import load_checkpoint, save_checkpoint
from .immunizer import (DefenseConfig, cache_teacher, calibrate_naive, immunize, naive_unlearning, save_cache)
from .optim import OptimizerConfig
from .scenes import load_dataset, make_benchmark, make_holdout_source, save_dataset
from .traps import TRAP_NAMES, TrapConfig

EXIT_OK, EXIT_INVALID, EXIT_NONFINITE = 0, 2, 3

SPLITS = ("source", "defense_target", "attack_target", "holdout_source")
MANIFEST = "manifest.json"
SNAPSHOT_STEPS = (100, 200, 300, 400)


# -- flat key = value configs ---------------------------------------------------


def parse_kv(text: str, origin: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{origin}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def _num(kv, key, cast, origin):
    try:
        return cast(kv[key])
    except ValueError:
        raise ConfigError(f"{origin}: {key} = {kv[key]!r} is not a valid {cast.__name__}") from None


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise ValueError(text)


_bool.__name__ = "bool"

DEFENSE_KEYS = {
    "method": str, "lambda_distill": float, "lambda_trap": float, "steps": int, "batch_size": int,
    "source_fraction": float, "lr": float, "weight_decay": float, "beta1": float, "beta2": float,
    "adam_eps": float, "grad_clip": float, "traps": str, "trap_epsilon": float, "topk_fraction": float,
    "ratio_cap": float, "seed": int, "combined_step": _bool, "reverse_weight": str,
}
ATTACK_KEYS = {
    "mode": str, "steps": int, "batch_size": int, "optimizer": str, "lr": float, "weight_decay": float,
    "grad_clip": float, "rank": int, "alpha": float, "dropout": float, "snapshot_every": int, "seed": int,
}


def _typed(kv: dict, schema: dict, origin: str) -> dict:
    unknown = sorted(set(kv) - set(schema))
    if unknown:
        raise ConfigError(f"{origin}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(schema))}")
    return {k: (_num(kv, k, schema[k], origin) if schema[k] is not str else kv[k]) for k in kv}


def defense_from_kv(kv: dict, origin: str = "<config>") -> tuple[DefenseConfig, str, str | None]:
    """Returns (config, method, reverse weight spec or None)."""
    v = _typed(kv, DEFENSE_KEYS, origin)
    base = DefenseConfig()
    opt = base.optimizer
    opt_fields = {"lr": "lr", "weight_decay": "weight_decay", "beta1": "beta1", "beta2": "beta2",
                  "adam_eps": "eps", "grad_clip": "grad_clip"}
    opt = replace(opt, **{dst: v[src] for src, dst in opt_fields.items() if src in v})
    trap = base.trap
    if "traps" in v:
        names = [t.strip() for t in v["traps"].split(",") if t.strip()]
        trap = replace(trap, enabled=frozenset(TRAP_NAMES if names == ["all"] else names))
    trap_fields = {"trap_epsilon": "epsilon", "topk_fraction": "topk_fraction", "ratio_cap": "ratio_cap"}
    trap = replace(trap, **{dst: v[src] for src, dst in trap_fields.items() if src in v})
    plain = {k: v[k] for k in ("lambda_distill", "lambda_trap", "steps", "batch_size", "source_fraction", "seed",
                               "combined_step") if k in v}
    cfg = replace(base, optimizer=opt, trap=trap, **plain)
    method = v.get("method", "gausslock")
    if method not in ("gausslock", "naive"):
        raise ConfigError(f"{origin}: method must be 'gausslock' or 'naive', got {method!r}")
    return cfg, method, v.get("reverse_weight")


def attack_from_kv(kv: dict, defaults: AttackConfig, origin: str = "<grid>") -> AttackConfig:
    v = _typed(kv, ATTACK_KEYS, origin)
    opt = defaults.optimizer
    if "optimizer" in v:
        opt = replace(opt, name=v["optimizer"])
    opt = replace(opt, **{k: v[k] for k in ("lr", "weight_decay", "grad_clip") if k in v})
    plain = {k: v[k] for k in ("mode", "steps", "batch_size", "rank", "alpha", "dropout", "snapshot_every", "seed")
             if k in v}
    return replace(defaults, optimizer=opt, **plain)


def parse_grid(text: str, defaults: AttackConfig, origin: str) -> list[AttackConfig]:
    """One attack per non-empty line, written as space-separated key=value pairs."""
    grid = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        kv = parse_kv("\n".join(line.split()), f"{origin}:{n}")
        grid.append(attack_from_kv(kv, defaults, f"{origin}:{n}"))
    if not grid:
        raise ConfigError(f"{origin}: grid file lists no attacks")
    return grid


# -- manifest -------------------------------------------------------------------


class Manifest:
    """Stage records (inputs, params, outputs with sha256) for one directory."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.path = self.dir / MANIFEST
        if self.path.exists():
            try:
                self.data = json.loads(self.path.read_text())
            except json.JSONDecodeError as e:
                raise ConfigError(f"{self.path}: unreadable manifest ({e})") from None
        else:
            self.data = {"version": 1, "stages": {}}

    def _rel(self, p) -> str:
        p = Path(p).resolve()
        try:
            return str(p.relative_to(self.dir.resolve()))
        except ValueError:
            return str(p)

    def _abs(self, key: str) -> Path:
        p = Path(key)
        return p if p.is_absolute() else self.dir / p

    def done(self, stage: str, inputs, params: dict, outputs) -> bool:
        rec = self.data["stages"].get(stage)
        if rec is None or rec["params"] != _jsonable(params):
            return False
        if rec["inputs"] != {self._rel(p): file_sha256(p) for p in inputs}:
            return False
        if sorted(rec["outputs"]) != sorted(self._rel(p) for p in outputs):
            return False
        return all(self._abs(k).exists() and file_sha256(self._abs(k)) == sha for k, sha in rec["outputs"].items())

    def record(self, stage: str, inputs, params: dict, outputs) -> None:
        self.data["stages"][stage] = {
            "params": _jsonable(params),
            "inputs": {self._rel(p): file_sha256(p) for p in inputs},
            "outputs": {self._rel(p): file_sha256(p) for p in outputs},
        }
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def verify(self, path) -> None:
        """Raise unless ``path`` matches the checksum some stage recorded for it."""
        key = self._rel(path)
        for rec in self.data["stages"].values():
            if key in rec["outputs"]:
                if file_sha256(path) != rec["outputs"][key]:
                    from .errors import ChecksumMismatch

                    raise ChecksumMismatch(f"{path}: checksum differs from {self.path}")
                return


def _jsonable(obj):
    return json.loads(json.dumps(obj, sort_keys=True, default=_enc))


def _enc(o):
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


# -- data helpers -----------------------------------------------------------------


def _data_paths(data_dir) -> dict:
    d = Path(data_dir)
    return {split: d / f"{split}.glds" for split in SPLITS}


def _load_data(data_dir) -> tuple[dict, dict]:
    d = Path(data_dir)
    man = Manifest(d)
    info = man.data.get("dataset")
    if info is None:
        raise ConfigError(f"{d}: not a dataset directory (no dataset entry in {MANIFEST}); run gen-data first")
    paths = _data_paths(d)
    out = {}
    for split, p in paths.items():
        if not p.exists():
            raise ConfigError(f"{p}: missing dataset file")
        man.verify(p)
        out[split] = load_dataset(p)
    return out, info


def _settings(args) -> EvalSettings:
    return EvalSettings(n_views=args.views, n_scenes=args.eval_scenes)


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    man = Manifest(out)
    paths = _data_paths(out)
    params = {"protocol": args.protocol, "seed": args.seed}
    if not args.force and man.done("gen-data", [], params, paths.values()):
        print(f"gen-data: {out} up to date")
        return EXIT_OK
    source, defense, attack_ds = make_benchmark(args.protocol, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    for split, ds in zip(SPLITS, (source, defense, attack_ds, make_holdout_source(args.seed))):
        save_dataset(ds, paths[split])
    man.data["dataset"] = params
    man.record("gen-data", [], params, paths.values())
    print(f"gen-data: wrote {len(paths)} datasets to {out}")
    return EXIT_OK


def cmd_train_base(args) -> int:
    _, info = _load_data(args.data)
    out = Path(args.out)
    man = Manifest(out.parent)
    recipe = TeacherRecipe(steps=args.steps, pool_size=args.pool,
                           optimizer=OptimizerConfig(lr=args.lr, weight_decay=args.weight_decay))
    seed = info["seed"] if args.seed is None else args.seed
    src = _data_paths(args.data)["source"]
    params = {"recipe": recipe, "seed": seed}
    if not args.force and man.done(f"train-base:{out.name}", [src], params, [out]):
        print(f"train-base: {out} up to date")
        return EXIT_OK
    teacher = pretrain_teacher(seed, recipe)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(teacher, out)
    man.record(f"train-base:{out.name}", [src], params, [out])
    print(f"train-base: wrote {out}")
    return EXIT_OK


def cmd_immunize(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise ConfigError(f"{cfg_path}: config file not found")
    cfg, method, rw = defense_from_kv(parse_kv(cfg_path.read_text(), str(cfg_path)), str(cfg_path))
    if method == "naive" and rw == "auto" and args.reference is None:
        raise ConfigError(f"{cfg_path}: reverse_weight = auto needs --reference CKPT")
    teacher_path, out = Path(args.teacher), Path(args.out)
    data, _ = _load_data(args.data)
    man = Manifest(out.parent)
    inputs = [teacher_path, cfg_path] + list(_data_paths(args.data).values())
    if args.reference:
        inputs.append(Path(args.reference))
    log_path = out.with_name(out.name + ".log.jsonl")
    cache_path = out.with_name(out.name + ".tcache")
    outputs = [out, log_path, cache_path]
    params = {"method": method, "views": args.views}
    if not args.force and man.done(f"immunize:{out.name}", inputs, params, outputs):
        print(f"immunize: {out} up to date")
        return EXIT_OK
    teacher = load_checkpoint(teacher_path)
    cache = cache_teacher(teacher, data["source"])
    if method == "gausslock":
        res = immunize(teacher, cache, data["defense_target"], cfg)
    elif rw == "auto":
        cams = render.default_cameras()[: args.views]
        ref = render.evaluate(load_checkpoint(args.reference), data["holdout_source"], cams).psnr_mean
        cal = calibrate_naive(teacher, cache, data["defense_target"], data["holdout_source"], ref, cfg, cameras=cams)
        res = cal.result
        res.provenance["calibration"] = {"reference_psnr": ref, "source_psnr": cal.source_psnr,
                                         "matched": cal.matched, "history": cal.history}
    else:
        weight = None if rw is None else float(rw)
        res = naive_unlearning(teacher, cache, data["defense_target"], cfg, reverse_weight=weight)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.weights, out)
    save_cache(cache, cache_path)
    with open(log_path, "w") as fh:
        fh.write(json.dumps({"provenance": res.provenance}, sort_keys=True) + "\n")
        for rec in res.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    man.record(f"immunize:{out.name}", inputs, params, outputs)
    print(f"immunize: wrote {out} ({res.provenance['method']})")
    return EXIT_OK


def _attack_defaults(args) -> AttackConfig:
    opt = OptimizerConfig(name=args.optimizer, lr=args.lr)
    return AttackConfig(mode=args.mode, steps=args.steps, optimizer=opt, rank=args.rank, seed=args.seed)


def cmd_attack(args) -> int:
    defaults = _attack_defaults(args)
    inputs = [Path(args.ckpt)] + list(_data_paths(args.data).values())
    if args.grid:
        grid_path = Path(args.grid)
        if not grid_path.exists():
            raise ConfigError(f"{grid_path}: grid file not found")
        grid = parse_grid(grid_path.read_text(), defaults, str(grid_path))
        inputs.append(grid_path)
    else:
        grid = [defaults]
    out = Path(args.out)
    man = Manifest(out)
    expected = [out / f"attack_{c.hash()}_step{s}" for c in grid for s in _snapshot_steps(c)]
    expected += [out / f"attack_{c.hash()}.log.jsonl" for c in grid]
    params = {"grid": grid}
    if not args.force and man.done("attack", inputs, params, expected):
        print(f"attack: {out} up to date")
        return EXIT_OK
    data, _ = _load_data(args.data)
    ckpt = load_checkpoint(args.ckpt)
    runs = []
    for cfg in grid:
        res = attack(ckpt, data["attack_target"], cfg)
        save_attack(res, out)
        runs.append({"config_hash": res.config_hash, "config": _jsonable(cfg),
                     "snapshots": [f"attack_{res.config_hash}_step{s}" for s, _ in res.snapshots]})
    (out / "attacks.json").write_text(json.dumps({"checkpoint": str(args.ckpt), "runs": runs}, indent=2,
                                                 sort_keys=True) + "\n")
    man.record("attack", inputs, params, expected)
    print(f"attack: {len(grid)} run(s) written to {out}")
    return EXIT_OK


def _snapshot_steps(cfg: AttackConfig) -> list[int]:
    steps = list(range(0, cfg.steps + 1, cfg.snapshot_every))
    if steps[-1] != cfg.steps:
        steps.append(cfg.steps)
    return steps


def cmd_eval(args) -> int:
    data, _ = _load_data(args.data)
    ds = _settings(args).subset(data[args.split])
    cams = _settings(args).cameras()
    if args.ckpt:
        table = render.evaluate(load_checkpoint(args.ckpt), ds, cams)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        table.write_csv(args.out)
        print(f"eval: {args.ckpt} mean PSNR {table.psnr_mean:.3f} dB -> {args.out}")
        return EXIT_OK
    snaps = sorted(Path(args.snapshots).glob("attack_*_step*"), key=_snapshot_key)
    snaps = [p for p in snaps if not p.name.endswith(".jsonl")]
    if not snaps:
        raise ConfigError(f"{args.snapshots}: no attack_<hash>_step<k> snapshots found")
    gt_cache: dict = {}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("checkpoint", "step") + render.CSV_COLUMNS)
        for p in snaps:
            table = render.evaluate(load_checkpoint(p), ds, cams, gt_cache)
            for r in table.rows:
                writer.writerow([p.name, _snapshot_key(p)[1], r["scene_id"], r["view"]]
                                + [repr(float(r[k])) for k in render.CSV_COLUMNS[2:]])
    print(f"eval: {len(snaps)} snapshots -> {args.out}")
    return EXIT_OK


def _snapshot_key(p: Path):
    stem, _, step = p.name.rpartition("_step")
    return stem, int(step) if step.isdigit() else -1


# -- experiment layout and report -------------------------------------------------

METHOD_FILES = {BASELINE: "teacher.ckpt", NAIVE: "naive.ckpt", GAUSSLOCK: "gausslock.ckpt"}
METHOD_DIRS = {BASELINE: "baseline", NAIVE: "naive", GAUSSLOCK: "gausslock"}


def build_report(exp_dir, settings: EvalSettings) -> dict:
    exp = Path(exp_dir)
    data, info = _load_data(exp / "data")
    cams = settings.cameras()
    holdout = data["holdout_source"]
    target = settings.subset(data["attack_target"])
    src_cache, tgt_cache = {}, {}
    methods = []
    for name, fname in METHOD_FILES.items():
        ckpt = exp / fname
        entry = {"name": name, "source_psnr": None, "rows": []}
        if ckpt.exists():
            entry["source_psnr"] = render.evaluate(load_checkpoint(ckpt), holdout, cams, src_cache).psnr_mean
        else:
            entry["reason"] = f"{fname} missing"
        for mode in ("lora", "full"):
            adir = exp / "attacks" / METHOD_DIRS[name] / mode
            found = {}
            if (adir / "attacks.json").exists():
                run = json.loads((adir / "attacks.json").read_text())["runs"][0]
                for snap in run["snapshots"]:
                    found[_snapshot_key(Path(snap))[1]] = adir / snap
            for step in (0,) + SNAPSHOT_STEPS:
                row = {"mode": mode, "step": step}
                if step in found and found[step].exists():
                    table = render.evaluate(load_checkpoint(found[step]), target, cams, tgt_cache)
                    row.update(target_psnr=table.psnr_mean, collapse=table.collapse_mean())
                else:
                    row.update(target_psnr=None, collapse=None, reason=f"no {mode} snapshot at step {step}")
                entry["rows"].append(row)
        methods.append(entry)
    return {"protocol": info["protocol"], "seed": info["seed"], "eval": asdict(settings), "methods": methods}


def cmd_report(args) -> int:
    report = build_report(args.exp, _settings(args))
    text = json.dumps(report, indent=2, sort_keys=True, default=float) + "\n"
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)
    for m in report["methods"]:
        cells = " ".join(f"{r['mode'][0]}{r['step']}={r['target_psnr']:.2f}" for r in m["rows"]
                         if r["target_psnr"] is not None and r["step"] in (100, 400))
        src = "n/a" if m["source_psnr"] is None else f"{m['source_psnr']:.2f}"
        print(f"{m['name']:<28} source {src:>6} dB  {cells}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    """Every stage of one protocol run; finished stages are skipped by checksum."""
    exp = Path(args.out)
    exp.mkdir(parents=True, exist_ok=True)
    common = ["--views", str(args.views)] + (["--force"] if args.force else [])
    data = exp / "data"
    steps = [
        ["gen-data", "--protocol", args.protocol, "--seed", str(args.seed), "--out", str(data)]
        + (["--force"] if args.force else []),
        ["train-base", "--data", str(data), "--steps", str(args.base_steps), "--pool", str(args.pool),
         "--out", str(exp / "teacher.ckpt")] + (["--force"] if args.force else []),
    ]
    for argv in steps:
        code = main(argv)
        if code:
            return code
    gl_cfg = exp / "gausslock.cfg"
    naive_cfg = exp / "naive.cfg"
    base_cfg = Path(args.defense_config).read_text() if args.defense_config else ""
    gl_cfg.write_text(base_cfg)
    naive_cfg.write_text(_strip_keys(base_cfg, {"method", "reverse_weight"}) + "method = naive\nreverse_weight = auto\n")
    stages = [
        ["immunize", "--teacher", str(exp / "teacher.ckpt"), "--data", str(data), "--config", str(gl_cfg),
         "--out", str(exp / "gausslock.ckpt")] + common,
        ["immunize", "--teacher", str(exp / "teacher.ckpt"), "--data", str(data), "--config", str(naive_cfg),
         "--reference", str(exp / "gausslock.ckpt"), "--out", str(exp / "naive.ckpt")] + common,
    ]
    for name, fname in METHOD_FILES.items():
        for mode in ("lora", "full"):
            stages.append(["attack", "--ckpt", str(exp / fname), "--data", str(data), "--mode", mode,
                           "--steps", str(args.attack_steps), "--seed", str(args.seed),
                           "--out", str(exp / "attacks" / METHOD_DIRS[name] / mode)]
                          + (["--force"] if args.force else []))
    stages.append(["report", "--exp", str(exp), "--out", str(exp / "report.json"), "--views", str(args.views),
                   "--eval-scenes", str(args.eval_scenes)])
    for argv in stages:
        code = main(argv)
        if code:
            return code
    return EXIT_OK


def _strip_keys(text: str, keys: set) -> str:
    lines = [ln for ln in text.splitlines() if ln.split("#", 1)[0].split("=", 1)[0].strip() not in keys]
    return "\n".join(lines) + ("\n" if lines else "")


# -- argument parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gausslock", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def eval_flags(sp, scenes_default):
        sp.add_argument("--views", type=int, default=3, help="number of camera views (1-6)")
        sp.add_argument("--eval-scenes", type=int, default=scenes_default, help="target scenes to evaluate")

    sp = sub.add_parser("gen-data", help="synthesize the benchmark datasets")
    sp.add_argument("--protocol", choices=("ideal", "shifted"), required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-base", help="pretrain the teacher on source scenes")
    sp.add_argument("--data", required=True)
    sp.add_argument("--steps", type=int, default=TeacherRecipe().steps)
    sp.add_argument("--out", required=True)
    sp.add_argument("--lr", type=float, default=TeacherRecipe().optimizer.lr)
    sp.add_argument("--weight-decay", type=float, default=TeacherRecipe().optimizer.weight_decay)
    sp.add_argument("--pool", type=int, default=TeacherRecipe().pool_size, help="size of the pretraining pool")
    sp.add_argument("--seed", type=int, default=None, help="defaults to the dataset seed")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_train_base)

    sp = sub.add_parser("immunize", help="run the defense (or the naive baseline)")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", required=True, help="flat key = value file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--reference", default=None, help="checkpoint whose source PSNR the naive baseline matches")
    sp.add_argument("--views", type=int, default=3)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_immunize)

    sp = sub.add_parser("attack", help="fine-tune a checkpoint on the attack targets")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=("lora", "full"), required=True)
    sp.add_argument("--grid", default=None, help="one attack per line as key=value pairs")
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=AttackConfig().steps)
    sp.add_argument("--optimizer", choices=("adamw", "sgd"), default="adamw")
    sp.add_argument("--lr", type=float, default=AttackConfig().optimizer.lr)
    sp.add_argument("--rank", type=int, default=AttackConfig().rank)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("eval", help="render and score a checkpoint or a snapshot directory")
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--ckpt")
    group.add_argument("--snapshots")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=SPLITS, default="attack_target")
    sp.add_argument("--out", required=True)
    eval_flags(sp, 10**9)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="join an experiment directory into report.json")
    sp.add_argument("--exp", required=True)
    sp.add_argument("--out", required=True)
    eval_flags(sp, 8)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("pipeline", help="gen-data, train-base, both defenses, all attacks, report")
    sp.add_argument("--protocol", choices=("ideal", "shifted"), required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--defense-config", default=None)
    sp.add_argument("--base-steps", type=int, default=TeacherRecipe().steps)
    sp.add_argument("--pool", type=int, default=TeacherRecipe().pool_size)
    sp.add_argument("--attack-steps", type=int, default=AttackConfig().steps)
    sp.add_argument("--force", action="store_true")
    eval_flags(sp, 8)
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return EXIT_INVALID if e.code else EXIT_OK
    if getattr(args, "views", 3) not in range(1, 7):
        print(f"gausslock {args.command}: --views must be in 1..6", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except NonFiniteLoss as e:
        print(f"gausslock {args.command}: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except (GaussLockError, ValueError, OSError) as e:
        print(f"gausslock {args.command}: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
