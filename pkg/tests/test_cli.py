import json
import subprocess
import sys

import numpy as np
import pytest

from ddpoison.benchmarks import FLEX_THETA0, batch_reactor_data
from ddpoison.cli import main
from ddpoison.optim import make_rng
from ddpoison.willems import write_state_csv


@pytest.fixture
def step_csv(tmp_path):
    path = tmp_path / "step.csv"
    assert main(["simulate", "--signal", "step", "--N", "512", "--out", str(path)]) == 0
    return path


def _json(path):
    return json.loads(path.read_text())


def test_simulate_header(step_csv):
    lines = step_csv.read_text().splitlines()
    assert lines[0] == "u,y" and len(lines) == 513


def test_simulate_white_noise_needs_seed(capsys):
    assert main(["simulate", "--signal", "white_noise"]) == 2
    assert "--seed" in capsys.readouterr().err


def test_vrft_fit_reproduces_reference(step_csv, tmp_path):
    out = tmp_path / "fit.json"
    assert main(["vrft-fit", "--data", str(step_csv), "--prefilter", "--out", str(out)]) == 0
    d = _json(out)
    assert np.max(np.abs(np.array(d["theta"]) - FLEX_THETA0)) <= 0.15
    assert d["spectral_radius"] < 1.0


def test_attack_random_json(step_csv, tmp_path):
    out = tmp_path / "a.json"
    args = ["attack", "random", "--data", str(step_csv), "--prefilter", "--seed", "3",
            "--eps-u", "0.1", "--eps-y", "0.01", "--out", str(out)]
    assert main(args) == 0
    d = _json(out)
    assert d["seed"] == 3 and len(d["a_u"]) == 512 and "spectral_radius" in d


def test_attack_requires_seed(step_csv):
    with pytest.raises(SystemExit):
        main(["attack", "maxmin", "--data", str(step_csv)])


def test_config_file(step_csv, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": str(step_csv), "prefilter": True, "eps-u": 0.1}))
    out = tmp_path / "a.json"
    assert main(["attack", "random", "--config", str(cfg), "--seed", "1", "--out", str(out)]) == 0
    assert _json(out)["budget"]["delta_u"] > 0


def test_unknown_config_key(step_csv, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": str(step_csv), "bogus": 1}))
    assert main(["vrft-fit", "--config", str(cfg)]) == 2


def test_willems_design_and_attack(tmp_path):
    data = tmp_path / "s.csv"
    write_state_csv(batch_reactor_data(15, make_rng(0)), data)
    out = tmp_path / "d.json"
    assert main(["willems", "design", "--data", str(data), "--out", str(out)]) == 0
    assert _json(out)["spectral_radius"] < 1.0
    out2 = tmp_path / "e.json"
    args = ["willems", "attack-eig", "--data", str(data), "--delta", "0.2", "--seed", "2",
            "--pso", '{"particles": 8, "iterations": 10}', "--out", str(out2)]
    assert main(args) == 0
    assert np.max(np.abs(_json(out2)["a_u"])) <= 0.2


def test_willems_attack_needs_seed(tmp_path):
    data = tmp_path / "s.csv"
    write_state_csv(batch_reactor_data(15, make_rng(0)), data)
    with pytest.raises(SystemExit):
        main(["willems", "attack-eig", "--data", str(data)])


def test_missing_file(capsys):
    assert main(["vrft-fit", "--data", "/nonexistent.csv"]) == 2


def test_experiment_rerun_byte_identical(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"N": 96, "budgets": [[0.1, 0.01], [0.0, 0.0]],
                               "optimizer": {"max_outer": 2, "max_inner": 4, "restarts": 1}}))
    for name in ("a", "b"):
        args = ["experiment", "table1", "--config", str(cfg), "--seed", "9", "--trials", "2",
                "--output-dir", str(tmp_path / name)]
        assert main(args) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "timing.txt")
    assert {"records.csv", "table1.csv", "curves.csv", "records.json", "manifest.json"} <= set(files)
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "ddpoison", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
