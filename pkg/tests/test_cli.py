import hashlib
import json

import pytest

from gausslock import cli

SMALL = ["--base-steps", "150", "--pool", "60", "--attack-steps", "400", "--views", "1", "--eval-scenes", "2"]


def sha(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    exp = tmp_path_factory.mktemp("exp")
    (exp / "defense.cfg").write_text("# short defense for the smoke run\nsteps = 20\n")
    code = run(["pipeline", "--protocol", "ideal", "--seed", 7, "--out", exp / "run",
                "--defense-config", exp / "defense.cfg"] + SMALL)
    assert code == 0
    return exp


def test_gen_data_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run(["gen-data", "--protocol", "ideal", "--seed", 7, "--out", tmp_path / d]) == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("*.glds"))
    assert files and [sha(tmp_path / "a" / f) for f in files] == [sha(tmp_path / "b" / f) for f in files]


def test_unknown_flag_exits_2(capsys):
    assert run(["gen-data", "--protocol", "ideal", "--seed", 1, "--out", "x", "--bogus"]) == 2
    assert "usage:" in capsys.readouterr().err


def test_validation_errors_exit_2(tmp_path, capsys):
    assert run(["gen-data", "--protocol", "sideways", "--seed", 1, "--out", tmp_path]) == 2
    assert run(["eval", "--ckpt", tmp_path / "none.ckpt", "--data", tmp_path / "none", "--out", tmp_path / "m.csv"]) == 2
    err = capsys.readouterr().err
    assert "none" in err


def test_report_has_every_cell(experiment):
    report = json.loads((experiment / "run" / "report.json").read_text())
    assert report["protocol"] == "ideal" and report["seed"] == 7
    methods = {m["name"]: m for m in report["methods"]}
    assert {"baseline", "gausslock", "naive-unlearning (reimpl.)"} <= set(methods)
    for m in methods.values():
        assert isinstance(m["source_psnr"], float)
        for mode in ("lora", "full"):
            rows = {r["step"]: r for r in m["rows"] if r["mode"] == mode}
            for step in (100, 200, 300, 400):
                assert isinstance(rows[step]["target_psnr"], float)
                assert set(rows[step]["collapse"]) >= {"pos_cond", "scale_aniso", "rot_coherence", "color_cond"}


def test_rerun_is_a_no_op(experiment, capsys):
    before = {p: sha(p) for p in (experiment / "run").rglob("*") if p.is_file()}
    code = run(["pipeline", "--protocol", "ideal", "--seed", 7, "--out", experiment / "run",
                "--defense-config", experiment / "defense.cfg"] + SMALL)
    assert code == 0
    assert "up to date" in capsys.readouterr().out
    after = {p: sha(p) for p in (experiment / "run").rglob("*") if p.is_file()}
    assert before == after


def test_bad_config_key_exits_2(experiment, tmp_path):
    run_dir = experiment / "run"
    (tmp_path / "bad.cfg").write_text("steps = 5\nlearning_rate = 1\n")
    code = run(["immunize", "--teacher", run_dir / "teacher.ckpt", "--data", run_dir / "data",
                "--config", tmp_path / "bad.cfg", "--out", tmp_path / "x.ckpt"])
    assert code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3(experiment, tmp_path, capsys):
    run_dir = experiment / "run"
    (tmp_path / "hot.cfg").write_text("steps = 40\nlr = 1000\nlambda_trap = 1e6\n")
    code = run(["immunize", "--teacher", run_dir / "teacher.ckpt", "--data", run_dir / "data",
                "--config", tmp_path / "hot.cfg", "--out", tmp_path / "x.ckpt"])
    assert code == 3
    assert "non-finite" in capsys.readouterr().err


def test_eval_writes_csv(experiment, tmp_path):
    run_dir = experiment / "run"
    out = tmp_path / "sub" / "m.csv"
    assert run(["eval", "--ckpt", run_dir / "gausslock.ckpt", "--data", run_dir / "data", "--out", out]) == 0
    assert out.read_text().splitlines()[0].startswith("scene_id,view,psnr_db")


def test_parse_kv_rejects_duplicates():
    assert cli.parse_kv("a = 1  # note\n\nb=2") == {"a": "1", "b": "2"}
    with pytest.raises(cli.ConfigError):
        cli.parse_kv("a = 1\na = 2")
    with pytest.raises(cli.ConfigError):
        cli.parse_kv("just words")
