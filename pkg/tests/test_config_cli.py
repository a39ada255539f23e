import csv
import io

import numpy as np
import pytest
import yaml
from hypothesis import given, strategies as st

from tiltlab import config as cfgmod
from tiltlab.cli import REPORT_COLUMNS, SWEEP_COLUMNS, TRAJECTORY_COLUMNS, main
from tiltlab.errors import ConfigError
from tiltlab.tree import dumps, random_model

SMALL = {
    "seed": 3,
    "scenario": {"vocab": 3, "depth": 3},
    "schedule": {"T": 2, "lambda": 0.05},
    "sweep": {"lambdas": [0.0, 0.05], "T": [1, 3], "modulators": ["none", "talr"]},
}


def write_cfg(tmp_path, raw=SMALL):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def read_csv(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


# ---- config


def test_defaults_validate():
    cfg = cfgmod.from_dict({})
    assert cfg.tilting_schedule().steps == 5
    assert cfgmod.loads(cfg.dumps()).to_dict() == cfg.to_dict()


def test_demo_config_loads():
    cfg = cfgmod.load("configs/demo.yaml")
    assert cfg.schedule.lam == 0.05 and cfg.sweep.T == [1, 5, 20]


@pytest.mark.parametrize(
    "raw",
    [
        {"bogus": 1},
        {"schedule": {"lamda": 0.1}},
        {"schedule": {"T": 3, "lambdas": [0.1, 0.2]}},
        {"schedule": {"modulator": "other"}},
        {"sweep": {"lambdas": []}},
        {"scenario": {"M_l": 5.0}},
        {"scenario": "not a mapping"},
    ],
)
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        cfgmod.from_dict(raw)


def test_invalid_yaml():
    with pytest.raises(ConfigError):
        cfgmod.loads("seed: [1,")


def test_budget_environment_wins(monkeypatch):
    cfg = cfgmod.from_dict({"budget": 100})
    assert cfg.resolved_budget() == 100
    monkeypatch.setenv("TILTLAB_BUDGET", "7")
    assert cfg.resolved_budget() == 7


@given(
    st.integers(0, 10**6),
    st.lists(st.floats(0.0, 1.0), min_size=1, max_size=5),
    st.floats(0.001, 0.5),
)
def test_config_round_trip(seed, lams, alpha):
    cfg = cfgmod.from_dict(
        {"seed": seed, "schedule": {"T": len(lams), "lambdas": lams, "alpha": alpha}}
    )
    back = cfgmod.loads(cfg.dumps())
    assert back.to_dict() == cfg.to_dict()
    assert back.tilting_schedule().lambdas == tuple(lams)


# ---- commands


def test_simulate_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["simulate", "--config", str(write_cfg(tmp_path)), "--out", str(out)])
    assert code in (0, 1)
    traj = read_csv(out / "trajectory.csv")
    assert list(traj[0]) == TRAJECTORY_COLUMNS and len(traj) == 2
    assert [int(r["t"]) for r in traj] == [0, 1]
    rep = read_csv(out / "report.csv")
    assert list(rep[0]) == REPORT_COLUMNS
    assert code == (0 if all(r["pass"] == "true" for r in rep) else 1)
    assert cfgmod.load(out / "config.yaml").seed == 3
    printed = capsys.readouterr().out
    gain = float(printed.split("domain_gain=")[1].split()[0])
    assert abs(gain + float(traj[-1]["delta_P2_cum"])) < 1e-5


def test_simulate_modulated_skips_bounds(tmp_path):
    raw = {**SMALL, "schedule": {"T": 2, "lambda": 0.05, "modulator": "talr"}}
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(write_cfg(tmp_path, raw)), "--out", str(out)]) == 0
    assert (out / "report.csv").read_text().strip() == ",".join(REPORT_COLUMNS)


def test_sweep_is_deterministic_across_workers(tmp_path):
    cfg = write_cfg(tmp_path)
    main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "a"), "--jobs", "1"])
    main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "b"), "--jobs", "2"])
    a = (tmp_path / "a" / "frontier.csv").read_bytes()
    assert a == (tmp_path / "b" / "frontier.csv").read_bytes()
    rows = read_csv(tmp_path / "a" / "frontier.csv")
    assert list(rows[0]) == SWEEP_COLUMNS and len(rows) == 8
    assert (tmp_path / "a" / "frontier.svg").read_text().startswith("<svg")


def test_verify_bounds(tmp_path):
    sc = tmp_path / "scen.yaml"
    sc.write_text(yaml.safe_dump({"vocab": 3, "depth": 3, "seed": 1}))
    sch = tmp_path / "sched.yaml"
    sch.write_text(yaml.safe_dump({"T": 1, "lambda": 0.05}))
    out = tmp_path / "r.csv"
    code = main(["verify-bounds", "--scenario", str(sc), "--schedule", str(sch), "--out", str(out)])
    rows = read_csv(out)
    assert {"one_step.P1", "one_step.P2", "multi_step.P1"} <= {r["name"] for r in rows}
    assert code == (0 if all(r["pass"] == "true" for r in rows) else 1)


def test_talr_solve(tmp_path, capsys):
    losses = tmp_path / "l.txt"
    losses.write_text("0.1\n1.0\n2.0\n")
    assert main(["talr-solve", "--losses", str(losses), "--tau", "1", "--mode", "simplex"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    w = np.array([float(r["weight"]) for r in rows])
    assert np.max(np.abs(w - [0.64261641366874076, 0.26126833664902402, 0.09611524968223522])) < 1e-15


def test_encode_decode(tmp_path, capsys):
    model = random_model(3, 3, np.random.Generator(np.random.Philox(0)))
    mpath = tmp_path / "q.tree"
    mpath.write_text(dumps(model))
    msg = tmp_path / "m.bin"
    assert main(["encode", "--model", str(mpath), "--response", "2,0", "--out", str(msg)]) == 0
    capsys.readouterr()
    assert main(["decode", "--model", str(mpath), "--message", str(msg)]) == 0
    assert capsys.readouterr().out.strip() == "2,0"
    other = tmp_path / "o.tree"
    other.write_text(dumps(random_model(3, 3, np.random.Generator(np.random.Philox(1)))))
    assert main(["decode", "--model", str(other), "--message", str(msg)]) == 1
    assert "ERROR model-mismatch" in capsys.readouterr().err


def test_gen_scenario(tmp_path):
    out = tmp_path / "sc"
    assert main(["gen-scenario", "--config", str(write_cfg(tmp_path)), "--out", str(out)]) == 0
    for name in ("P1.tree", "P2.tree", "Q0.tree", "hard_set.txt", "stats.json"):
        assert (out / name).exists()


def test_error_reporting(tmp_path, capsys, monkeypatch):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense: 1\n")
    assert main(["simulate", "--config", str(bad)]) == 1
    assert "ERROR config" in capsys.readouterr().err
    monkeypatch.setenv("TILTLAB_BUDGET", "10")
    assert main(["simulate", "--config", str(write_cfg(tmp_path)), "--out", str(tmp_path / "x")]) == 1
    assert "ERROR budget" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["verify-all", "no-such-check"])
    assert info.value.code == 2
