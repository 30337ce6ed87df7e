import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from lobmm.calibration import write_ticks_csv
from lobmm.cli import main
from lobmm.model import reference_model
from lobmm.synthetic import simulate_ticks

SMALL = ["--T", "60", "--n-out", "20"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["reference-model", "--out", str(d / "model.json")]) == 0
    assert main(["solve", "--model", str(d / "model.json"), *SMALL, "--out", str(d / "star.json")]) == 0
    assert main(["solve", "--model", str(d / "model.json"), *SMALL, "--ebar", "0", "--out", str(d / "womo.json")]) == 0
    return d


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_solve_default_grid_shape(work):
    out = work / "default.json"
    vals = work / "values.csv"
    assert main(["solve", "--model", str(work / "model.json"), "--out", str(out), "--dump-values", str(vals)]) == 0
    pol = json.loads(out.read_text())
    assert len(pol["actions"]) == 100 * 201 * 6
    assert pol["layout"] == "t,y,i"
    lines = vals.read_text().splitlines()
    assert lines[0] == "t,y,i,value" and len(lines) == 1 + 101 * 201 * 6


def test_womo_policy_has_no_take(work):
    pol = json.loads((work / "womo.json").read_text())
    assert all(a["type"] == "make" for a in pol["actions"])


def test_exponential_with_gamma_is_usage_error(work, capsys):
    rc = main(["solve", "--model", str(work / "model.json"), "--objective", "exponential", "--eta", "1", "--gamma", "1", "--out", str(work / "x.json")])
    assert rc == 2
    assert "gamma" in capsys.readouterr().err
    assert not (work / "x.json").exists()


def test_backtest_suite_layout_and_determinism(work):
    args = ["backtest", "--model", str(work / "model.json"), "--policy", str(work / "star.json"),
            "--policy-womo", str(work / "womo.json"), "--paths", "300", "--T", "60", "--seed", "4"]
    assert main([*args, "--out", str(work / "a.csv")]) == 0
    assert main([*args, "--out", str(work / "b.csv"), "--threads", "4"]) == 0
    a = (work / "a.csv").read_text()
    assert a == (work / "b.csv").read_text()
    assert a.splitlines()[0] == "statistic,optimal,womo,constant,random"
    assert len(a.splitlines()) == 12


def test_backtest_missing_policy(work, capsys):
    rc = main(["backtest", "--model", str(work / "model.json"), "--strategy", "star", "--paths", "10", "--out", str(work / "c.csv")])
    assert rc == 2
    assert "--policy" in capsys.readouterr().err


def test_inputs_not_mutated_and_no_temp_files(work):
    before = {p.name: digest(p) for p in work.glob("*.json")}
    assert main(["backtest", "--model", str(work / "model.json"), "--policy", str(work / "star.json"), "--strategy", "star",
                 "--paths", "20", "--T", "60", "--out", str(work / "d.csv"), "--per-path", str(work / "pp.csv")]) == 0
    assert {p.name: digest(p) for p in work.glob("*.json")} == before
    assert not list(work.glob(".*.tmp"))


def test_frontier_commands(work):
    out = work / "f.csv"
    base = ["frontier", "--model", str(work / "model.json"), *SMALL, "--paths", "50", "--out", str(out)]
    assert main([*base, "--gammas", "2"]) == 0
    assert len(out.read_text().splitlines()) == 2
    assert out.read_text().splitlines()[0] == "gamma,sigma_star,mean_star,sigma_womo,mean_womo,ir,nir"
    assert main([*base, "--gammas=-1"]) == 2


def test_config_file_and_override(work):
    cfg = work / "cfg.json"
    cfg.write_text(json.dumps({"gammas": [4, 1], "paths": 30, "model": str(work / "model.json"), "T": 60, "n-out": 20}))
    out = work / "fc.csv"
    assert main(["frontier", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3
    assert main(["frontier", "--config", str(cfg), "--gammas", "3", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 2
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["frontier", "--config", str(cfg), "--out", str(out)]) == 2


def test_export_commands(work):
    heat = work / "heat.csv"
    assert main(["export", "--policy", str(work / "star.json"), "--slice", "0", "--out", str(heat)]) == 0
    first = heat.read_text()
    assert first.splitlines()[0] == "y,i,zone,qb,qa,lb,la,e"
    assert main(["export", "--policy", str(work / "star.json"), "--slice", "0", "--out", str(heat)]) == 0
    assert heat.read_text() == first
    (work / "empty.json").write_text("")
    assert main(["export", "--policy", str(work / "empty.json"), "--slice", "0", "--out", str(heat)]) == 2
    hist = work / "hist.csv"
    assert main(["export", "--stats", str(work / "pp.csv"), "--hist", str(hist), "--bins", "5"]) == 0
    assert hist.read_text().splitlines()[0] == "left,right,count"
    assert main(["export"]) == 2


def test_calibrate_command(tmp_path):
    ticks = simulate_ticks(reference_model(), np.random.default_rng(2), days=1)
    src = tmp_path / "ticks.csv"
    write_ticks_csv(src, ticks)
    out = tmp_path / "cal.json"
    buckets = ",".join(str(34200 + 3600 * k) for k in range(8))
    rc = main(["calibrate", "--input", str(src), "--buckets", buckets, "--symmetrize", "--out", str(out)])
    assert rc == 0
    assert out.exists() and (tmp_path / "cal.report.json").exists()
    model = json.loads(out.read_text())
    assert model["exec_bid"]["Bb"] == model["exec_ask"]["Ba"]
    (tmp_path / "empty.csv").write_text("")
    assert main(["calibrate", "--input", str(tmp_path / "empty.csv"), "--buckets", buckets, "--out", str(out)]) == 2


def test_help_lists_defaults():
    r = subprocess.run([sys.executable, "-m", "lobmm", "solve", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "default: 300" in r.stdout and "default: 100" in r.stdout
    r = subprocess.run([sys.executable, "-m", "lobmm", "backtest", "--help"], capture_output=True, text=True)
    assert "default: 100000" in r.stdout and "default: 0.3" in r.stdout and "default: 45" in r.stdout
    r = subprocess.run([sys.executable, "-m", "lobmm", "nonsense"], capture_output=True, text=True)
    assert r.returncode == 2
