#!/usr/bin/env python3
"""Tests for the driftmle CLI: config layering, exit codes, artifacts."""

import contextlib
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import driftmle
from artifacts import read_config_line
from errors import ConfigError
from sim import ObservationScheme, ObservedPath, save_path

OU_MODEL = {"a": "-x", "b": "1", "theta": 2.0, "x0": 0.0}


def _run(argv):
    """(exit code, stdout, stderr) of one CLI invocation."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = driftmle.main(argv)
    return code, out.getvalue(), err.getvalue()


def _write_config(tmp, data, name="config.json"):
    path = Path(tmp) / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def test_load_config_layers():
    cfg = driftmle.load_config()
    assert cfg == driftmle.DEFAULT_CONFIG
    assert cfg is not driftmle.DEFAULT_CONFIG
    with tempfile.TemporaryDirectory() as tmp:
        path = _write_config(tmp, {"model": {"a": "-x"}, "scheme": {"n": 200}})
        cfg = driftmle.load_config(path, {"scheme": {"alpha": 0.9}})
    assert cfg["model"]["a"] == "-x"
    assert cfg["model"]["b"] == driftmle.DEFAULT_CONFIG["model"]["b"]
    assert cfg["scheme"]["n"] == 200
    assert cfg["scheme"]["alpha"] == 0.9
    print("  config layering: PASS")


def test_config_errors():
    with tempfile.TemporaryDirectory() as tmp:
        bad = [
            ({"model": {"c": "x"}}, "model"),
            ({"scheme": {"alpha": 1.5}}, "scheme.alpha"),
            ({"experiment": {"replicates": 1}}, "experiment.replicates"),
            ({"model": {"a": "y + 1"}}, "model.a"),
            ({"model": {"b": "sin(x"}}, "model.b"),
        ]
        for data, field_path in bad:
            try:
                driftmle.load_config(_write_config(tmp, data))
                assert False, data
            except ConfigError as exc:
                assert exc.field_path == field_path, (data, exc.field_path)
        broken = Path(tmp) / "broken.json"
        broken.write_text("{\"model\": ", encoding="utf-8")
        try:
            driftmle.load_config(str(broken))
            assert False
        except ConfigError as exc:
            assert exc.field_path == "--config"
    print("  config errors: PASS")


def test_exit_code_config_error():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = _write_config(tmp, {"model": {"c": "x"}})
        code, _, err = _run(["check", "--config", cfg, "--json-errors", "--out", tmp])
    assert code == 1
    record = json.loads(err.strip().splitlines()[-1])
    assert record["exit_code"] == 1
    assert record["error_type"] == "ConfigError"
    assert record["field"] == "model"
    print("  exit code 1: PASS")


def test_usage_errors_exit_1():
    for argv in (["check", "--n", "abc", "--json-errors"],
                 ["check", "--bogus", "--json-errors"],
                 ["--json-errors"]):
        code, out, err = _run(argv)
        assert code == 1, argv
        assert out == ""
        assert "usage:" not in err
        record = json.loads(err.strip().splitlines()[-1])
        assert record["error_type"] == "ConfigError"
        assert record["exit_code"] == 1
        assert record["field"] == "argv"
    code, _, err = _run(["simulate", "--method", "rk4"])
    assert code == 1
    assert "error:" in err
    print("  usage errors exit 1: PASS")


def test_check_json_ou():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = _write_config(tmp, {"model": OU_MODEL})
        code, out, _ = _run(["check", "--config", cfg, "--n", "1000", "--alpha", "0.9",
                             "--json", "--out", tmp])
    assert code == 0
    data = json.loads(out)
    assert abs(data["invariant_law"]["info"] - 0.25) < 1e-6
    quad_g = data["invariant_law"]["G_quadrature"]
    assert abs(quad_g["value"] - math.sqrt(math.pi / 2.0)) < 1e-9
    assert quad_g["evaluations"] > 0 and not quad_g["suspected_divergent"]
    assert abs(data["predicted_std"] - 2.0 * 1000 ** -0.45) < 1e-6
    statuses = {c["id"]: c["status"] for c in data["report"]["checks"]}
    assert set(statuses.values()) == {"pass"}, statuses
    assert "theorem" in data["report"]["applicable_results"]
    assert data["config"]["model"]["a"] == "-x"
    print("  check --json on OU: PASS")


def test_exit_code_assumption_failure():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = _write_config(tmp, {"model": {"a": "1", "b": "1", "theta": 1.0, "x0": 0.0}})
        code, out, err = _run(["check", "--config", cfg, "--json-errors", "--out", tmp])
        assert code == 2
        record = json.loads(err.strip().splitlines()[-1])
        assert record["error_type"] == "AssumptionFailure"
        assert "A2" in record["failed"]
        assert "A2" in out
    print("  exit code 2: PASS")


def test_simulate_gate_and_force():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = _write_config(tmp, {"model": {"a": "-x^3", "b": "1", "theta": 1.0, "x0": 0.5}})
        code, _, _ = _run(["simulate", "--config", cfg, "--n", "20", "--alpha", "0.5",
                           "--out", tmp])
        assert code == 2
        code, _, _ = _run(["simulate", "--config", cfg, "--n", "20", "--alpha", "0.5",
                           "--out", tmp, "--force"])
        assert code == 0
        assert (Path(tmp) / "path.csv").exists()
    print("  simulate gate: PASS")


def test_simulate_writes_echoed_artifacts():
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = _write_config(tmp, {"model": OU_MODEL,
                                       "io": {"formats": ["csv", "npz", "json"]}})
        out_dir = str(Path(tmp) / "run")
        code, out, _ = _run(["simulate", "--config", cfg_path, "--n", "50", "--alpha", "0.5",
                             "--seed", "9", "--out", out_dir])
        assert code == 0
        assert "N=353" in out
        run = Path(out_dir)
        for name in ("path.csv", "path.npz", "path.json", "driftmle.log"):
            assert (run / name).exists(), name
        assert not any(p.suffix == ".tmp" for p in run.iterdir())
        # the CSV echo reproduces the effective config
        echoed = driftmle.load_config(str(run / "path.csv"))
        assert echoed["model"] == OU_MODEL
        assert echoed["scheme"]["n"] == 50
        assert echoed["experiment"]["master_seed"] == 9
        assert json.loads((run / "path.json").read_text())["config"] == echoed
        # re-estimating from the stored path and from a fresh simulation agree
        code, stored, _ = _run(["estimate", "--config", str(run / "path.csv"), "--path",
                                str(run / "path.npz"), "--json", "--out", out_dir])
        assert code == 0
        code, fresh, _ = _run(["estimate", "--config", str(run / "path.csv"), "--json",
                               "--out", out_dir])
        assert code == 0
        assert json.loads(stored)["theta_hat"] == json.loads(fresh)["theta_hat"]
        assert json.loads(fresh)["std_err"] is not None
    print("  simulate artifacts and echo: PASS")


def test_estimate_stored_telescoping_path():
    scheme = ObservationScheme(4, 0.5)
    path = ObservedPath(scheme, np.arange(9) / 8.0, 0, "euler", "handmade")
    with tempfile.TemporaryDirectory() as tmp:
        file = Path(tmp) / "line.csv"
        save_path(path, file)
        cfg = _write_config(tmp, {"model": {"a": "1", "b": "1"}})
        code, out, _ = _run(["estimate", "--config", cfg, "--path", str(file), "--json",
                             "--out", tmp])
        assert code == 0
        data = json.loads(out)
        assert data["theta_hat"] == 0.5
        assert data["N_used"] == 8
        assert data["std_err"] is None
        saved = json.loads((Path(tmp) / "estimate.json").read_text())
        assert saved["theta_hat"] == 0.5
    print("  estimate stored path: PASS")


def test_experiment_small():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = _write_config(tmp, {"model": OU_MODEL})
        code, out, _ = _run(["experiment", "--config", cfg, "--n", "20", "--alpha", "0.5",
                             "--replicates", "4", "--threads", "2", "--out", tmp])
        assert code == 0
        assert "n=20" in out
        summary = json.loads((Path(tmp) / "summary.json").read_text())
        assert summary["cells"][0]["replicates"] == 4
        assert summary["config"]["experiment"]["ns"] == [20]
        lines = (Path(tmp) / "replicates.csv").read_text().splitlines()
        assert lines[0].startswith("# config=")
        assert len(lines) == 2 + 4
    print("  experiment: PASS")


def test_experiment_force_without_invariant_law():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = _write_config(tmp, {"model": {"a": "1", "b": "1", "theta": 1.0, "x0": 0.0}})
        argv = ["experiment", "--config", cfg, "--n", "20", "--alpha", "0.5",
                "--replicates", "4", "--method", "euler", "--out", tmp]
        code, _, _ = _run(argv)
        assert code == 2
        code, out, _ = _run(argv + ["--force"])
        assert code == 0
        assert "n=20" in out
        summary = json.loads((Path(tmp) / "summary.json").read_text())
        assert math.isnan(summary["info"])
        cell = summary["cells"][0]
        assert cell["replicates"] == 4
        assert math.isfinite(cell["mean_theta_hat"]) and cell["std_theta_hat"] > 0.0
        assert math.isnan(cell["predicted_std"])
    print("  experiment --force without invariant law: PASS")


def test_table_grid():
    ns, alphas = driftmle.table_grid()
    assert len(ns) * len(alphas) == 18
    assert ns[0] == 50 and ns[-1] == 5000 and alphas == [0.1, 0.5, 0.9]
    assert driftmle.table_grid(quick=True) == ([1000], [0.5, 0.9])
    assert driftmle.table_grid("n=5000,alpha=0.9") == ([5000], [0.9])
    assert driftmle.table_grid("n=5000,alpha=0.9", quick=True) == ([5000], [0.9])
    args = driftmle.build_parser().parse_args(["table", "--quick"])
    assert args.quick and args.cell is None
    print("  table grid: PASS")


def test_table_cell():
    with tempfile.TemporaryDirectory() as tmp:
        code, out, _ = _run(["table", "--case", "2", "--cell", "n=50,alpha=0.1",
                             "--replicates", "4", "--out", tmp])
        assert code == 0
        assert "Case 2" in out
        assert "(2.69321)" in out
        summary = json.loads((Path(tmp) / "summary.json").read_text())
        assert list(summary["cases"]) == ["2"]
        table_txt = Path(tmp) / "table.txt"
        lines = table_txt.read_text().splitlines()
        assert lines[0].startswith("# config=")
        assert lines[1] == "# grid: n in [50], alpha in [0.1], 4 replicates"
        assert read_config_line(table_txt)["experiment"]["replicates"] == 4
        assert "Case 2" in lines[2]
        code, _, err = _run(["table", "--cell", "n=50", "--json-errors", "--out", tmp])
        assert code == 1
        assert json.loads(err.strip().splitlines()[-1])["field"] == "--cell"
    print("  table --cell: PASS")


if __name__ == "__main__":
    print("driftmle CLI tests")
    test_load_config_layers()
    test_config_errors()
    test_exit_code_config_error()
    test_usage_errors_exit_1()
    test_check_json_ou()
    test_exit_code_assumption_failure()
    test_simulate_gate_and_force()
    test_simulate_writes_echoed_artifacts()
    test_estimate_stored_telescoping_path()
    test_experiment_small()
    test_experiment_force_without_invariant_law()
    test_table_grid()
    test_table_cell()
    print("\nAll CLI tests passed!")
