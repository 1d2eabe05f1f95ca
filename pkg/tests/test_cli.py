import json
import os
import subprocess
import sys
import time

import pytest

from fbm_lab.cli import dispatch


def run(capsys, *argv):
    code = dispatch(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_subcommand_help_exits_zero(capsys):
    for cmd in ("gen-data", "train", "eval", "sweep", "oracle-check", "report"):
        code, out, _ = run(capsys, cmd, "--help")
        assert code == 0 and "usage" in out


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fbm_lab", "eval", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "--checkpoints" in proc.stdout


def test_missing_required_flag(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--out-dir", str(tmp_path))
    assert code == 2 and "--dataset" in err


def test_unknown_flag_lists_valid_flags(capsys, tmp_path):
    code, _, err = run(capsys, "report", "--run-dir", str(tmp_path), "--bogus")
    assert code == 2 and "--bogus" in err and "valid flags" in err and "--run-dir" in err


def test_oracle_check_requires_inputs_unless_tabular(capsys, tmp_path):
    code, _, err = run(capsys, "oracle-check", "--out", str(tmp_path))
    assert code == 2 and "--checkpoint" in err


def test_report_on_empty_dir_names_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "report", "--run-dir", str(tmp_path))
    assert code == 1 and "eval.csv" in err


def test_end_to_end_smoke(capsys, tmp_path):
    t0 = time.time()
    data, ckpts, ev = (str(tmp_path / n) for n in ("data", "ckpt", "eval"))
    assert run(capsys, "gen-data", "--env", "point_mass", "--occlusion", "noisy",
               "--episodes", "5", "--seed", "1", "--out", data)[0] == 0
    assert run(capsys, "train", "--dataset", data, "--variant", "fb", "--routing", "all",
               "--steps", "500", "--batch", "32", "--checkpoint-every", "250",
               "--seed", "2", "--out-dir", ckpts)[0] == 0
    assert sorted(f for f in os.listdir(ckpts) if f.endswith(".fbm")) == \
        ["ckpt_0000250.fbm", "ckpt_0000500.fbm"]
    assert run(capsys, "eval", "--checkpoints", ckpts, "--dataset", data, "--rollouts", "2",
               "--labels-k", "200", "--out", ev)[0] == 0
    code, out, _ = run(capsys, "report", "--run-dir", ev)
    assert code == 0
    for name in ("summary.csv", "tasks.csv", "summary.svg", "tasks.svg", "manifest.json"):
        assert os.path.exists(os.path.join(ev, "report", name))
    manifest = json.load(open(os.path.join(ckpts, "manifest.json")))
    assert manifest["seed"] == 2 and "ckpt_0000500.fbm" in manifest["artifacts"]
    assert manifest["config"]["train"]["learning_steps"] == 500
    assert time.time() - t0 < 300


def test_oracle_check_neural_path(capsys, tmp_path):
    data, ckpts, out = (str(tmp_path / n) for n in ("data", "ckpt", "oc"))
    assert run(capsys, "gen-data", "--env", "gridworld", "--behaviour", "uniform_random",
               "--episodes", "3", "--out", data)[0] == 0
    assert run(capsys, "train", "--dataset", data, "--steps", "20", "--batch", "16",
               "--checkpoint-every", "20", "--context-length", "1", "--out-dir", ckpts)[0] == 0
    code, stdout, _ = run(capsys, "oracle-check", "--checkpoint", ckpts, "--dataset", data,
                          "--linear", "2", "--out", out)
    assert code == 0 and "lin1" in stdout
    rep = json.load(open(os.path.join(out, "oracle_check.json")))
    assert rep["checkpoint_step"] == 20 and len(rep["tasks"]) == 6


def test_oracle_check_rejects_point_mass(capsys, tmp_path):
    data = str(tmp_path / "data")
    run(capsys, "gen-data", "--episodes", "1", "--out", data)
    code, _, err = run(capsys, "oracle-check", "--checkpoint", data, "--dataset", data,
                       "--out", str(tmp_path / "o"))
    assert code == 1
