import csv
import hashlib
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mixshell.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY, dump_config, main, read_config, resolve
from mixshell.tree_model import TreeTopology

GOLDEN = Path(__file__).parent / "golden"


def run(tmp_path, command, ini=None, *extra, name="out"):
    args = [command, "--out", str(tmp_path / name)]
    if ini is not None:
        cfg = tmp_path / f"{name}.ini"
        cfg.write_text(ini)
        args += ["--config", str(cfg)]
    return main(args + list(extra)), tmp_path / name


def read_csv(path):
    rows = list(csv.reader(io.StringIO(path.read_text())))
    return rows[0], np.array(rows[1:], dtype=float)


def tree_of(files):
    return {p.name: p.read_bytes() for p in sorted(files.iterdir())}


def test_simulate_golden(tmp_path):
    code, out = run(tmp_path, "simulate", (GOLDEN / "simulate_n3.ini").read_text())
    assert code == EXIT_OK
    assert (out / "trajectory.csv").read_bytes() == (GOLDEN / "simulate_n3_trajectory.csv").read_bytes()
    assert (out / "summary.json").read_bytes() == (GOLDEN / "simulate_n3_summary.json").read_bytes()


def test_simulate_matches_closed_form(tmp_path):
    # N=3 from (1,0,0): x_1' = -4 x_1 x_2, x_2' = 4 x_1^2, so x_2 = tanh(4t), x_1 = sech(4t)
    code, out = run(tmp_path, "simulate", "[model]\nN = 3\n[run]\nx0 = 1, 0, 0\n")
    header, data = read_csv(out / "trajectory.csv")
    assert header == ["t", "x_1", "x_2", "x_3"]
    t = data[:, 0]
    np.testing.assert_allclose(data[:, 2], np.tanh(4 * t), atol=1e-9)
    np.testing.assert_allclose(data[:, 1], 1 / np.cosh(4 * t), atol=1e-9)
    summary = json.loads((out / "summary.json").read_text())
    assert list(summary)[:4] == ["energy_initial", "energy_final", "drift", "steps"]
    assert summary["drift"] < 1e-8


def test_simulate_zero(tmp_path):
    code, out = run(tmp_path, "simulate", "[run]\nx0 = zero\n")
    header, data = read_csv(out / "trajectory.csv")
    assert code == EXIT_OK and header == ["t"] + [f"x_{i}" for i in range(1, 9)]
    assert np.all(data[:, 1:] == 0)
    assert json.loads((out / "summary.json").read_text())["drift"] == 0.0


@pytest.mark.parametrize("ini", [
    "garbage without sections",
    "[model]\nbogus = 1\n",
    "[nosuch]\nx = 1\n",
    "[model]\nN = three\n",
    "[model]\nlambda = 0.5\n",
    "[run]\nseed = -4\n",
    "[integrator]\nmethod = euler\n",
    "[run]\nx0 = 1, 2\n",
    "[model]\nh = 3=12\n",
])
def test_bad_config_exit_2_and_no_outputs(tmp_path, ini, capsys):
    code, out = run(tmp_path, "simulate", ini)
    assert code == EXIT_CONFIG
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_runtime_failure_exit_3(tmp_path):
    code, out = run(tmp_path, "simulate", "[integrator]\nmax_steps = 10\n")
    assert code == EXIT_RUNTIME and not out.exists()


def test_tree_simulate_writes_topology(tmp_path):
    code, out = run(tmp_path, "tree-simulate", "[model]\ndepth = 2\nbranching = 3\n[run]\nT = 0.5\n")
    assert code == EXIT_OK
    top = TreeTopology.from_text((out / "topology.txt").read_text())
    assert top.Q == 13 and top.to_text() == (out / "topology.txt").read_text()
    header, data = read_csv(out / "trajectory.csv")
    assert len(header) == 14
    assert json.loads((out / "summary.json").read_text())["drift"] < 1e-8


def test_tree_simulate_from_topology_file(tmp_path):
    topo = tmp_path / "t.txt"
    topo.write_text("0 0 -1\n1 1 0\n2 1 0\n3 2 1\n4 2 2\n")
    code, out = run(tmp_path, "tree-simulate", f"[model]\ntopology = {topo}\n")
    assert code == EXIT_OK
    assert (out / "topology.txt").read_text() == topo.read_text()


def test_tree_command_rejects_shell_kind(tmp_path):
    code, _ = run(tmp_path, "tree-simulate", "[model]\nkind = shell\n")
    assert code == EXIT_CONFIG


def test_verify_exit_codes(tmp_path, capsys):
    code, out = run(tmp_path, "verify", "[verify]\nn_cases = 300\n", name="ok")
    report = json.loads((out / "verify.json").read_text())
    assert code == EXIT_OK and report["passed"] and len(report["checks"]) == 3
    code, out = run(tmp_path, "verify", "[model]\nh = 3:12.0\n[verify]\nn_cases = 300\n", name="bad")
    report = json.loads((out / "verify.json").read_text())
    assert code == EXIT_VERIFY
    assert {c["name"]: c["passed"] for c in report["checks"]}["divergence"] is False
    capsys.readouterr()
    code, out = run(tmp_path, "verify", "[verify]\nchecks =\n", name="empty")
    assert code == EXIT_OK and json.loads((out / "verify.json").read_text())["checks"] == []
    assert "warning" in capsys.readouterr().err
    code, _ = run(tmp_path, "verify", "[verify]\nchecks = divergence, nonsense\n", name="unknown")
    assert code == EXIT_CONFIG


def test_invariance_outputs(tmp_path):
    code, out = run(tmp_path, "invariance", "[invariance]\nM = 400\nstationarity_times = 0.1, 0.5\n")
    doc = json.loads((out / "invariance.json").read_text())
    assert code == EXIT_OK and doc["verdict"] == "PASS"
    assert list(doc)[:9] == ["model", "params_digest", "T", "M", "seed", "per_component", "verdict",
                             "thresholds", "failures"]
    assert doc["stationarity"]["passed"]
    header, data = read_csv(out / "invariance.csv")
    assert header == ["component", "mean_z", "var_z", "m4_z", "ks_p"] and data.shape == (8, 5)


def test_statistical_fail_is_not_an_error(tmp_path):
    code, out = run(tmp_path, "invariance", "[model]\nh = 3:12.0\n[invariance]\nM = 2000\n")
    assert code == EXIT_OK
    assert json.loads((out / "invariance.json").read_text())["verdict"] == "FAIL"


def test_tree_invariance(tmp_path):
    code, out = run(tmp_path, "tree-invariance", "[invariance]\nM = 300\n")
    doc = json.loads((out / "invariance.json").read_text())
    assert code == EXIT_OK and doc["model"] == "tree" and len(doc["per_component"]) == 15


def test_galerkin_default_monotone(tmp_path):
    code, out = run(tmp_path, "galerkin")
    header, data = read_csv(out / "galerkin.csv")
    assert code == EXIT_OK
    assert header == ["level", "j", "sup_diff_ref", "sup_diff_next", "max_abs", "bound"]
    assert np.all(np.diff(data[:-1, 2]) < 0)
    assert json.loads((out / "galerkin.json").read_text())["monotone"] == {"1": True}


def test_tails_small(tmp_path):
    code, out = run(tmp_path, "tails", "[tails]\nM = 200\nlevels = 4, 6\nn_resamples = 200\n")
    header = (out / "tails.csv").read_text().splitlines()[0].split(",")
    assert code == EXIT_OK and header == ["level", "statistic", "eps", "quantile", "ci_low", "ci_high"]
    doc = json.loads((out / "tails.json").read_text())
    assert {"uniform", "levels", "passed", "seed", "config_digest"} <= set(doc)


CHEAP = {
    "simulate": "[run]\nT = 0.2\n",
    "tree-simulate": "[run]\nT = 0.2\n",
    "verify": "[verify]\nn_cases = 200\nn_states = 100\n",
    "invariance": "[invariance]\nM = 200\n",
    "tree-invariance": "[model]\ndepth = 2\n[invariance]\nM = 200\n",
    "galerkin": "[galerkin]\nlevels = 4, 6, 8\n",
    "tails": "[tails]\nM = 100\nlevels = 3, 4\nn_resamples = 100\n",
}


@pytest.mark.parametrize("command", sorted(CHEAP))
def test_rerun_is_byte_identical(tmp_path, command):
    code_a, a = run(tmp_path, command, CHEAP[command], name="a")
    code_b, b = run(tmp_path, command, CHEAP[command], "--threads", "1", name="b")
    assert code_a == code_b == EXIT_OK
    assert tree_of(a) == tree_of(b)


def test_resolved_config_round_trip_and_digest(tmp_path):
    code, out = run(tmp_path, "simulate", "[model]\nN = 5\nh = 3:9.5, 2:1.25\n[run]\nT = 0.1\nseed = 17\n")
    resolved = (out / "resolved_config.ini").read_text()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config_digest"] == hashlib.sha256(resolved.encode()).hexdigest()
    assert summary["seed"] == 17
    assert dump_config(resolve(read_config(resolved), "simulate")) == resolved
    code, again = run(tmp_path, "simulate", resolved, name="again")
    assert tree_of(again) == tree_of(out)


def test_seed_flag_wins(tmp_path):
    _, a = run(tmp_path, "simulate", "[run]\nseed = 1\nT = 0.05\n", "--seed", "2", name="a")
    _, b = run(tmp_path, "simulate", "[run]\nseed = 2\nT = 0.05\n", name="b")
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()
    assert "seed = 2" in (a / "resolved_config.ini").read_text()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mixshell", "simulate", "--out", str(tmp_path / "m")],
                          capture_output=True, text=True, input="")
    assert proc.returncode == 0
    assert (tmp_path / "m" / "trajectory.csv").exists()
    bad = subprocess.run([sys.executable, "-m", "mixshell", "nosuchcommand"], capture_output=True, text=True)
    assert bad.returncode == 2
