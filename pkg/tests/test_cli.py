import csv
import json
import subprocess
import sys

import pytest

from mvsde.cli import ConfigError, load_config, main

SMALL = ["--steps", "50", "--N-list", "8,16", "--reps", "4", "--M", "128"]


def run_dirs(root):
    return sorted(p for p in root.iterdir() if p.is_dir())


def test_defaults_and_seed_echo(tmp_path):
    cfg = load_config()
    assert cfg.seed == 42 and cfg.command == "poc"
    assert main(["simulate", "--outdir", str(tmp_path), "--steps", "20", "--N", "5"]) == 0
    (run,) = run_dirs(tmp_path)
    echo = json.load(open(run / "config.json"))
    assert echo["seed"] == 42
    assert "threads" not in echo
    rows = list(csv.reader(open(run / "results.csv")))
    assert len(rows) == 1 + 5 * 21


def test_config_errors_name_the_key(tmp_path):
    with pytest.raises(ConfigError, match="steps"):
        load_config(overrides={"steps": 0})
    with pytest.raises(ConfigError, match="steps"):
        load_config(overrides={"steps": 10, "dt": 0.1})
    with pytest.raises(ConfigError, match="available"):
        load_config(overrides={"model": {"name": "lorenz"}})
    with pytest.raises(ConfigError, match="N_list"):
        load_config(overrides={"N_list": [64, 32]})
    with pytest.raises(ConfigError, match="bogus"):
        load_config(overrides={"bogus": 1})
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "seed": 1,\n  "reps": \n}')
    with pytest.raises(ConfigError, match="line 4"):
        load_config(bad)


def test_config_file_with_flag_override(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 7, "reps": 8, "model": {"name": "double_well", "params": {"kappa": 0.2}}}))
    cfg = load_config(path, {"seed": 9})
    assert cfg.seed == 9 and cfg.reps == 8
    assert cfg.model["params"]["kappa"] == 0.2


def test_invalid_config_exit_code(tmp_path, capsys):
    assert main(["poc", "--outdir", str(tmp_path), "--steps", "0"]) == 2
    assert "steps" in capsys.readouterr().err
    assert main(["poc", "--outdir", str(tmp_path), "--model", "nope"]) == 2
    assert not any(tmp_path.iterdir())


def test_picard_exit_codes(tmp_path):
    assert main(["picard", "--outdir", str(tmp_path / "a"), "--steps", "50", "--M", "2000"]) == 0
    cfg = tmp_path / "tight.json"
    cfg.write_text(json.dumps({"tol": 1e-9, "max_iter": 2}))
    assert main(["picard", "--config", str(cfg), "--outdir", str(tmp_path / "b"), "--steps", "50", "--M", "200"]) == 1
    (run,) = run_dirs(tmp_path / "b")
    assert json.load(open(run / "meta.json"))["passed"] is False
    assert len(list(csv.reader(open(run / "results.csv")))) == 3


def test_science_failure_exit_code(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"window": [1.0, 2.0]}))
    assert main(["poc", "--config", str(cfg), "--outdir", str(tmp_path / "out")] + SMALL) == 1
    (run,) = run_dirs(tmp_path / "out")
    assert (run / "results.csv").exists() and (run / "meta.json").exists()


def test_divergence_exit_code(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"init": {"kind": "constant", "loc": 10.0}, "T": 10.0}))
    code = main(["simulate", "--config", str(cfg), "--model", "double_well", "--scheme", "em", "--steps", "20",
                 "--N", "3", "--outdir", str(tmp_path / "out")])
    assert code == 2
    assert "divergence" in capsys.readouterr().err


def test_malliavin_check_passes(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"paths": 10}))
    code = main(["malliavin-check", "--config", str(cfg), "--model", "double_well", "--steps", "100", "--M", "500",
                 "--outdir", str(tmp_path)])
    assert code == 0
    (run,) = run_dirs(tmp_path)
    rows = list(csv.reader(open(run / "results.csv")))
    assert rows[0] == ["path", "variational", "oracle", "rel_error"]
    assert len(rows) == 11


def test_threads_do_not_change_bytes(tmp_path):
    outs = []
    for threads in ("1", "3"):
        d = tmp_path / threads
        assert main(["poc", "--outdir", str(d), "--threads", threads] + SMALL) in (0, 1)
        (run,) = run_dirs(d)
        outs.append(((run / "results.csv").read_bytes(), (run / "config.json").read_bytes()))
    assert outs[0] == outs[1]


def test_writes_only_under_outdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["simulate", "--outdir", "out", "--steps", "10", "--N", "2"]) == 0
    assert [p.name for p in tmp_path.iterdir()] == ["out"]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mvsde", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "malliavin-check" in res.stdout
