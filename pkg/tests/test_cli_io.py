import csv
import json
import math

import pytest

from fallingballs.cli import main
from fallingballs.config import ExperimentConfig, load_config, parse_config_text
from fallingballs.errors import ConfigError
from fallingballs.experiments import (
    EXIT_CONFIG,
    EXIT_DEGENERATE,
    EXIT_GUARD,
    EXIT_INCONCLUSIVE,
    EXIT_OK,
    EXIT_SINGULARITY,
    point_seeds,
    run_experiment,
)


def _manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_config_parsing(tmp_path):
    f = tmp_path / "exp.ini"
    f.write_text("[experiment]\nmode = cone\nmasses = 3, 2, 1\nseed = 4\nmax_time = none\n")
    cfg = load_config(f, {"n_points": "7"})
    assert cfg.masses == (3.0, 2.0, 1.0) and cfg.seed == 4 and cfg.n_points == 7
    assert cfg.max_time is None
    cfg = parse_config_text("mode = sweep\nsweep_profiles = 3 2 1; 1 2 3\n")
    assert cfg.sweep_profiles == ((3.0, 2.0, 1.0), (1.0, 2.0, 3.0))


@pytest.mark.parametrize(
    "text,field,line",
    [
        ("masses = 1\n", "masses", 1),
        ("mode = simulate\nseed = x\n", "seed", 2),
        ("mode = simulate\n\ntol_tie = -1\n", "tol_tie", 3),
        ("bogus = 1\n", "bogus", 1),
        ("mode = fly\n", "mode", 1),
    ],
)
def test_config_errors_name_field_and_line(text, field, line):
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert info.value.field == field and info.value.line == line


def test_config_file_error_exit_code(tmp_path, capsys):
    f = tmp_path / "bad.ini"
    f.write_text("masses = 1, -2\n")
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(f), "--output-dir", str(out)]) == EXIT_CONFIG
    assert "field 'masses'" in capsys.readouterr().err
    assert _manifest(out)["status"] == "config-error"


def test_simulate_zero_events(tmp_path):
    out = tmp_path / "sim"
    code = main(["simulate", "--masses", "1,1", "--max-events", "0", "--output-dir", str(out)])
    assert code == EXIT_OK
    rows = list(csv.reader(open(out / "events.csv")))
    assert rows == [["t", "sigma", "q_1", "q_2", "v_1", "v_2"]]
    m = _manifest(out)
    assert m["outputs"]["events.csv"]["bytes"] == (out / "events.csv").stat().st_size


def test_simulate_rows_round_trip(tmp_path):
    out = tmp_path / "sim"
    cfg = ExperimentConfig(mode="simulate", masses=(3, 2, 1), max_events=50, output_dir=str(out))
    assert run_experiment(cfg).exit_code == EXIT_OK
    rows = list(csv.DictReader(open(out / "events.csv")))
    assert len(rows) == 50
    t = [float(r["t"]) for r in rows]
    assert all(a < b for a, b in zip(t, t[1:]))
    cfg = cfg.replace(event_format="jsonl", output_dir=str(tmp_path / "j"))
    run_experiment(cfg)
    lines = (tmp_path / "j" / "events.jsonl").read_text().splitlines()
    assert [json.loads(x)["t"] for x in lines] == t


def test_simulate_refuses_degenerate_state(tmp_path):
    out = tmp_path / "deg"
    code = main([
        "simulate", "--masses", "1,1", "--output-dir", str(out),
        "--set", "initial_q=0, 0.5", "--set", "initial_v=0, 1", "--set", "normalize=true",
    ])
    assert code == EXIT_DEGENERATE
    m = _manifest(out)
    assert m["status"] == "degenerate" and m["diagnostics"]["degenerate"]["k"] == 1


def test_singular_start_exit_code(tmp_path):
    t = -1 + math.sqrt(3)
    cfg = ExperimentConfig(
        mode="simulate", masses=(1, 1, 1), initial_q=(1.0, 2.0, 2.0 + t), initial_v=(-1.0, 1.0, 0.0),
        normalize=True, output_dir=str(tmp_path),
    )
    res = run_experiment(cfg)
    assert res.exit_code == EXIT_SINGULARITY
    assert set(res.manifest["diagnostics"]["singularity"]["sigmas"]) == {0, 2}


def test_guard_exit_code_and_manifest(tmp_path):
    out = tmp_path / "g"
    code = main([
        "degenerate-demo", "--masses", "3,2,1", "--max-events", "100000", "--output-dir", str(out),
        "--set", "perturb=1e-8",
    ])
    assert code == EXIT_GUARD
    m = _manifest(out)
    assert m["status"] == "guard" and m["diagnostics"]["guard"]["burst_size"] > 10_000
    assert "guard.json" in m["outputs"]


def test_degenerate_demo_freezes_stack(tmp_path):
    cfg = ExperimentConfig(mode="degenerate-demo", masses=(2, 1, 1, 1), stuck=2, max_events=100, output_dir=str(tmp_path))
    res = run_experiment(cfg)
    assert res.exit_code == EXIT_OK and res.manifest["diagnostics"]["degenerate"] == {"detected": True, "k": 2}
    rows = list(csv.DictReader(open(tmp_path / "events.csv")))
    assert all(float(r["q_1"]) == 0.0 and float(r["q_2"]) == 0.0 for r in rows)


def test_lyapunov_inconclusive_exit(tmp_path):
    cfg = ExperimentConfig(mode="lyapunov", masses=(2, 1), n_returns=150, zero_threshold=0.01, output_dir=str(tmp_path))
    res = run_experiment(cfg)
    assert res.exit_code == EXIT_INCONCLUSIVE
    assert json.loads((tmp_path / "spectrum.json").read_text())["zero_exponent_count"] == "inconclusive"


def test_lyapunov_two_balls(tmp_path):
    cfg = ExperimentConfig(mode="lyapunov", masses=(2, 1), n_returns=5000, output_dir=str(tmp_path))
    res = run_experiment(cfg)
    assert res.exit_code == EXIT_OK
    spec = json.loads((tmp_path / "spectrum.json").read_text())
    assert len(spec["estimate"]["flow_exponents"]) == 2 and spec["zero_exponent_count"] == 0
    comp = json.loads((tmp_path / "comparison.json").read_text())
    assert comp["separation_ratio"] >= 10
    hist = list(csv.DictReader(open(tmp_path / "history.csv")))
    assert len(hist) == 50 and hist[-1]["returns"] == "5000"


def test_sweep_rows_flags_and_failures(tmp_path):
    cfg = ExperimentConfig(
        mode="sweep", masses=(1, 1, 1), sweep_profiles=((1, 1, 1), (1, 2, 3)), sweep_ratios=(2.0,),
        n_returns=3000, output_dir=str(tmp_path),
    )
    assert run_experiment(cfg).exit_code == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert [r["masses"] for r in rows] == ["1.0 1.0 1.0", "1.0 2.0 3.0", "4.0 2.0 1.0"]
    assert [r["unordered"] for r in rows] == ["false", "true", "false"]
    mins = [float(r["min_abs_flow"]) for r in rows]
    assert mins[0] == min(mins)
    bad = cfg.replace(burst_limit=1, zero_threshold=0.1, output_dir=str(tmp_path / "bad"))
    assert run_experiment(bad).exit_code == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "bad" / "sweep.csv")))
    assert all(r["status"] == "failed" and "AccumulationGuardError" in r["error"] for r in rows)


def test_point_seeds_deterministic():
    assert point_seeds(3, 4) == point_seeds(3, 4)
    assert len(set(point_seeds(3, 4))) == 4


def test_neutral_and_cone_outputs(tmp_path):
    cfg = ExperimentConfig(mode="neutral", masses=(3, 2, 1), n_points=3, segment_length=0, output_dir=str(tmp_path / "n"))
    assert run_experiment(cfg).exit_code == EXIT_OK
    data = json.loads((tmp_path / "n" / "neutral.json").read_text())
    assert all(p["dim_h"] == 2 and p["dim_v"] == 2 for p in data["points"])
    cfg = ExperimentConfig(mode="cone", masses=(1, 2), n_points=2, horizon=300, output_dir=str(tmp_path / "c"))
    run_experiment(cfg)
    summary = json.loads((tmp_path / "c" / "cone.json").read_text())["summary"]
    assert summary["n_negative_deltas"] > 0 and summary["min_delta_q"] < 0
