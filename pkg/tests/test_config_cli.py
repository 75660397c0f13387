import json
import os

import numpy as np
import pytest

from pidesolve.cli import main as cli_main
from pidesolve.config import validate_config
from pidesolve.errors import ConfigError, GridMismatchError, SchemaError
from pidesolve.runner import (EXIT_CRITERION, EXIT_ERROR, EXIT_OK,
                              compare_report, run_experiment)


def heat_solve_config(**numerics):
    num = {"grid_n": 20, "paths": 4000, "x0": 0.0,
           "basis": {"kind": "poly", "degree": 3}}
    num.update(numerics)
    return {"task": "solve", "seed": 3,
            "model": {"name": "custom",
                      "params": {"diffusion": {"slope": 0.0, "intercept": 1.0}}},
            "driver": {"name": "zero"},
            "terminal": {"name": "square"},
            "numerics": num}


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def test_minimal_config_defaults():
    cfg = validate_config({"task": "solve", "seed": 1, "model": {"name": "bs"},
                           "driver": {"name": "zero"},
                           "terminal": {"name": "square"}})
    assert cfg.numerics["grid_n"] == 50
    assert cfg.numerics["paths"] == 100_000
    assert cfg.numerics["basis"] == {"kind": "poly", "degree": 4, "cells": 40,
                                     "box": None}
    assert cfg.numerics["picard"] == 3


def test_unknown_key_rejected_with_path():
    with pytest.raises(ConfigError, match="modle"):
        validate_config({"task": "solve", "seed": 1, "modle": {"name": "bs"}})
    with pytest.raises(ConfigError, match="numerics.grid_m"):
        validate_config({"task": "solve", "seed": 1, "model": {"name": "bs"},
                         "driver": {"name": "zero"}, "terminal": {"name": "square"},
                         "numerics": {"grid_m": 10}})


def test_seed_required():
    with pytest.raises(ConfigError, match="seed"):
        validate_config({"task": "solve", "model": {"name": "bs"},
                         "driver": {"name": "zero"}, "terminal": {"name": "square"}})


def test_type_mismatches():
    with pytest.raises(SchemaError):
        validate_config({"task": "solve", "seed": "one", "model": {"name": "bs"},
                         "driver": {"name": "zero"}, "terminal": {"name": "square"}})
    with pytest.raises(SchemaError):
        validate_config({"task": "solve", "seed": 1, "model": {"name": "bs"},
                         "driver": {"name": "zero"}, "terminal": {"name": "square"},
                         "numerics": {"paths": "many"}})
    with pytest.raises(SchemaError):
        validate_config("{not json")


def test_obstacle_weight_floor_rule():
    raw = {"task": "solve-obstacle", "seed": 1, "model": {"name": "bs"},
           "driver": {"name": "discount", "params": {"rate": 0.05}},
           "terminal": {"name": "put", "params": {"strike": 100}},
           "obstacle": {"name": "put", "params": {"strike": 100, "kappa": 1.0}},
           "weight": {"p": 2.0}}
    with pytest.raises(ConfigError, match="kappa \\+ dim \\+ 1"):
        validate_config(raw)
    raw["weight"]["p"] = 4.0
    validate_config(raw)


def test_task_requirements():
    with pytest.raises(ConfigError, match="terminal"):
        validate_config({"task": "solve", "seed": 1, "model": {"name": "bs"},
                         "driver": {"name": "zero"}})
    with pytest.raises(ConfigError, match="oracle"):
        validate_config({"task": "oracle", "seed": 1})


def test_config_hash_semantics(tmp_path):
    a = validate_config(heat_solve_config())
    reordered = json.loads(json.dumps(heat_solve_config(), sort_keys=True))
    b = validate_config(reordered)
    assert a.canonical_json() == b.canonical_json()
    c = validate_config(heat_solve_config(grid_n=21))
    assert a.canonical_json() != c.canonical_json()


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

def test_deterministic_reports(tmp_path):
    r1, c1 = run_experiment(heat_solve_config(), out_dir=tmp_path / "a")
    r2, c2 = run_experiment(heat_solve_config(), out_dir=tmp_path / "b")
    assert c1 == c2 == EXIT_OK
    assert r1.hash == r2.hash
    assert r1.body == r2.body
    # timestamps live outside the hashed body
    assert "timestamp" in r1.meta and "timestamp" not in r1.body


def test_all_artifacts_listed(tmp_path):
    report, code = run_experiment(heat_solve_config(), out_dir=tmp_path)
    files = {f for f in os.listdir(tmp_path) if f != ".lock"}
    assert files == set(report.body["artifacts"])


def test_lock_file_serializes(tmp_path):
    (tmp_path / ".lock").write_text("")
    with pytest.raises(ConfigError, match="locked"):
        run_experiment(heat_solve_config(), out_dir=tmp_path)
    (tmp_path / ".lock").unlink()
    run_experiment(heat_solve_config(), out_dir=tmp_path)
    assert not (tmp_path / ".lock").exists()


def test_exit_code_on_criterion_failure(tmp_path):
    cfg = {"task": "compare", "seed": 5,
           "model": {"name": "bs", "params": {"r": 0.05, "sigma": 0.2}},
           "driver": {"name": "discount", "params": {"rate": 0.05}},
           "terminal": {"name": "put", "params": {"strike": 100}},
           "numerics": {"grid_n": 10, "paths": 3000, "x0": 100.0,
                        "basis": {"kind": "poly", "degree": 3}},
           "compare": {"oracle": {"kind": "binomial", "s0": 100, "strike": 100,
                                  "rate": 0.05, "sigma": 0.2, "horizon": 1.0,
                                  "steps": 200, "option": "put"},
                       "tol_rel": 1e-9}}
    report, code = run_experiment(cfg, out_dir=tmp_path)
    assert code == EXIT_CRITERION
    assert not report.passed


def test_exit_code_on_error(tmp_path):
    cfg = heat_solve_config(paths=50)
    cfg["numerics"]["basis"] = {"kind": "poly", "degree": 9}  # floor violation
    report, code = run_experiment(cfg, out_dir=tmp_path)
    assert code == EXIT_ERROR
    assert report.body["status"] == "error"


def test_simulate_task_dumps(tmp_path):
    cfg = {"task": "simulate", "seed": 2,
           "model": {"name": "toy-uniform"},
           "numerics": {"grid_n": 5, "paths": 100, "x0": 0.0,
                        "dump_paths": "csv"}}
    report, code = run_experiment(cfg, out_dir=tmp_path / "csv")
    assert code == EXIT_OK
    assert "paths.csv" in report.body["artifacts"]
    header = (tmp_path / "csv" / "paths.csv").read_text().splitlines()[0]
    assert header == "path,step,time,x0,n_jumps"

    cfg["numerics"]["dump_paths"] = "binary"
    report, code = run_experiment(cfg, out_dir=tmp_path / "bin")
    assert code == EXIT_OK
    assert (tmp_path / "bin" / "paths.bin").read_bytes()[:5] == b"PIDE1"


def test_solve_obstacle_nonconvergence_exit_code(tmp_path):
    cfg = {"task": "solve-obstacle", "seed": 4,
           "model": {"name": "bs", "params": {"r": 0.05, "sigma": 0.2}},
           "driver": {"name": "discount", "params": {"rate": 0.05}},
           "terminal": {"name": "put", "params": {"strike": 100}},
           "obstacle": {"name": "put", "params": {"strike": 100, "kappa": 1.0,
                                                  "iota": 101.0}},
           "weight": {"p": 4},
           "numerics": {"grid_n": 10, "paths": 5000, "x0": 100.0, "tol": 1e-12,
                        "basis": {"kind": "local", "cells": 12},
                        "schedule": [1, 2]}}
    report, code = run_experiment(cfg, out_dir=tmp_path)
    assert code == EXIT_CRITERION
    assert not report.body["headline"]["converged"]


def test_solve_obstacle_task(tmp_path):
    cfg = {"task": "solve-obstacle", "seed": 4,
           "model": {"name": "bs", "params": {"r": 0.05, "sigma": 0.2}},
           "driver": {"name": "discount", "params": {"rate": 0.05}},
           "terminal": {"name": "put", "params": {"strike": 100}},
           "obstacle": {"name": "put", "params": {"strike": 100, "kappa": 1.0,
                                                  "iota": 101.0}},
           "weight": {"p": 4},
           "numerics": {"grid_n": 10, "paths": 5000, "x0": 100.0, "tol": 5.0,
                        "basis": {"kind": "local", "cells": 12},
                        "schedule": [1, 8, 64]}}
    report, code = run_experiment(cfg, out_dir=tmp_path)
    assert code == EXIT_OK
    trace = json.loads((tmp_path / "trace.json").read_text())
    assert trace["converged"]
    assert {"u_level_1.csv", "nu_histogram.csv", "trace.json"} <= set(os.listdir(tmp_path))


# ---------------------------------------------------------------------------
# compare fixtures
# ---------------------------------------------------------------------------

def _write_xu(path, x, u):
    with open(path, "w") as fh:
        fh.write("x,u\n")
        for xi, ui in zip(x, u):
            fh.write(f"{xi},{ui}\n")


def test_compare_identical_files(tmp_path):
    x = np.linspace(0, 1, 11)
    u = 1.0 + x**2
    _write_xu(tmp_path / "a.csv", x, u)
    _write_xu(tmp_path / "b.csv", x, u)
    table = compare_report(tmp_path / "a.csv", tmp_path / "b.csv", tol_rel=0.01)
    assert table.passed and table.sup_rel == 0.0


def test_compare_shifted_oracle_fails(tmp_path):
    x = np.linspace(0, 1, 11)
    u = 1.0 + x**2
    _write_xu(tmp_path / "a.csv", x, u)
    _write_xu(tmp_path / "b.csv", x, 1.1 * u)
    table = compare_report(tmp_path / "a.csv", tmp_path / "b.csv", tol_rel=0.05)
    assert not table.passed
    assert 0.09 <= table.sup_rel <= 0.101


def test_compare_grid_mismatch(tmp_path):
    _write_xu(tmp_path / "a.csv", [0.0, 1.0], [1.0, 2.0])
    _write_xu(tmp_path / "b.csv", [0.0, 0.5, 1.0], [1.0, 1.5, 2.0])
    with pytest.raises(GridMismatchError):
        compare_report(tmp_path / "a.csv", tmp_path / "b.csv", tol_rel=0.1)
    # restricting to a region with matching points passes
    _write_xu(tmp_path / "c.csv", [0.0, 0.3, 1.0], [1.0, 9.0, 2.0])
    table = compare_report(tmp_path / "a.csv", tmp_path / "c.csv", tol_rel=0.1,
                           region=(0.9, 1.1))
    assert table.passed


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def test_cli_solve_roundtrip(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(heat_solve_config()))
    code = cli_main(["solve", "--config", str(cfg_path), "--out",
                     str(tmp_path / "run")])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "report:" in out and "u0:" in out
    payload = json.loads((tmp_path / "run" / "report.json").read_text())
    assert payload["body"]["task"] == "solve"
    assert payload["body"]["flags"]["seed"] == 3


def test_cli_seed_override_changes_hash(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(heat_solve_config()))
    assert cli_main(["solve", "--config", str(cfg_path), "--out",
                     str(tmp_path / "r1")]) == EXIT_OK
    assert cli_main(["solve", "--config", str(cfg_path), "--seed", "99", "--out",
                     str(tmp_path / "r2")]) == EXIT_OK
    h1 = json.loads((tmp_path / "r1" / "report.json").read_text())["hash"]
    h2 = json.loads((tmp_path / "r2" / "report.json").read_text())["hash"]
    assert h1 != h2


def test_cli_task_mismatch(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(heat_solve_config()))
    assert cli_main(["simulate", "--config", str(cfg_path)]) == EXIT_ERROR


def test_cli_bad_config(tmp_path):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text("{\"task\": \"solve\"")
    assert cli_main(["solve", "--config", str(cfg_path)]) == EXIT_ERROR
    cfg_path.write_text(json.dumps({"task": "solve", "seed": 1}))
    assert cli_main(["solve", "--config", str(cfg_path)]) == EXIT_ERROR


def test_cli_threads_env_fallback(tmp_path, monkeypatch, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(heat_solve_config()))
    monkeypatch.setenv("SOLVER_THREADS", "4")
    assert cli_main(["solve", "--config", str(cfg_path), "--out",
                     str(tmp_path / "run")]) == EXIT_OK
    payload = json.loads((tmp_path / "run" / "report.json").read_text())
    assert payload["body"]["flags"]["threads"] == 4
    assert payload["body"]["flags"]["deterministic"] is True
