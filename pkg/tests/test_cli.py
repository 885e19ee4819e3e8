import csv
import json
import os
import subprocess
import sys

import pytest

from jumpspde import cli


def _files(root):
    out = {}
    for base, _, names in os.walk(root):
        for n in names:
            p = os.path.join(base, n)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def _cfg(tmp_path, doc):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return str(p)


def test_parse_eps():
    assert cli.parse_eps("1/8..1/64") == [1 / 8, 1 / 16, 1 / 32, 1 / 64]
    assert cli.parse_eps("1/8,1/32") == [1 / 8, 1 / 32]
    assert cli.parse_eps("") == []
    with pytest.raises(cli.ConfigError):
        cli.parse_eps("1/8..1/24")


def test_resolve_config_layers_and_validates():
    cfg = cli.resolve_config("simulate", {"eps": 1 / 16}, {"seed": 5, "equation": None})
    assert cfg["eps"] == 1 / 16 and cfg["seed"] == 5 and cfg["equation"] == "kpz"
    for bad in ({"eps": 0.7}, {"seeds": -1}, {"unknown": 1}, {"equation": "heat"}):
        with pytest.raises(cli.ConfigError):
            cli.resolve_config("simulate", bad)


def test_graph_check_passes_and_writes_artifacts(tmp_path, capsys):
    code = cli.main(["graph-check", "--out", str(tmp_path), "--run-id", "r1"])
    assert code == cli.EXIT_OK
    run_dir = tmp_path / "graph-check" / "r1"
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["passed"] and summary["diagrams"] == 9
    with open(run_dir / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9 and all(r["matches"] == "true" for r in rows)
    assert json.loads((run_dir / "config.json").read_text())["command"] == "graph-check"
    assert "PASS" in capsys.readouterr().out


def test_failed_assertion_exits_one(tmp_path):
    cfg = _cfg(tmp_path, {"slope": [-0.5, 0.0], "eps": [0.125, 0.0625]})
    code = cli.main(["renorm-scan", "--config", cfg, "--out", str(tmp_path), "--run-id", "x", "--no-figures"])
    assert code == cli.EXIT_ASSERT
    summary = json.loads((tmp_path / "renorm-scan" / "x" / "summary.json").read_text())
    assert not summary["passed"]


@pytest.mark.parametrize("argv", [
    ["simulate", "--eps", "0.9"],
    ["simulate", "--eps", "1/8,1/16"],
    ["simulate", "--jobs", "0"],
    ["renorm-scan", "--eps", "1/8..1/24"],
    ["simulate", "--eq", "heat"],
    ["simulate", "--config", "/nonexistent/cfg.json"],
    ["simulate", "--eps", "0.3"],  # 1/eps not an integer, caught when the grid is built
    ["nosuch"],
])
def test_config_errors_exit_two(tmp_path, argv):
    assert cli.main(argv + ["--out", str(tmp_path)] if argv[0] != "nosuch" else argv) == cli.EXIT_CONFIG


def test_schema_type_error_exits_two(tmp_path):
    cfg = _cfg(tmp_path, {"seeds": "ten"})
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    cfg = _cfg(tmp_path, [1, 2])
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_budget_refusal_exits_three(tmp_path, monkeypatch):
    monkeypatch.setenv("JUMPSPDE_BUDGET", "10")
    cfg = _cfg(tmp_path, {"with_c2": True, "eps": [0.25]})
    code = cli.main(["renorm-scan", "--eq", "phi4", "--config", cfg, "--out", str(tmp_path)])
    assert code == cli.EXIT_BUDGET


def test_runtime_error_exits_four(tmp_path, monkeypatch):
    def boom(cfg, jobs):
        raise RuntimeError("solver failure")
    monkeypatch.setitem(cli.RUNNERS, "graph-check", boom)
    assert cli.main(["graph-check", "--out", str(tmp_path)]) == cli.EXIT_RUNTIME


def test_empty_sweep_writes_header_only(tmp_path):
    code = cli.main(["renorm-scan", "--eps", "", "--out", str(tmp_path), "--run-id", "e"])
    assert code == cli.EXIT_OK
    text = (tmp_path / "renorm-scan" / "e" / "results.csv").read_text()
    assert text == "eps,C1,C2,C3,c_eps\n"
    assert not (tmp_path / "renorm-scan" / "e" / "figures").exists()


def test_simulate_artifacts_are_byte_reproducible(tmp_path):
    cfg = _cfg(tmp_path, {"eps": 0.125, "seeds": 3, "horizon": 0.02, "probes": [[0], [4]]})
    a, b = tmp_path / "a", tmp_path / "b"
    for root in (a, b):
        assert cli.main(["simulate", "--config", cfg, "--out", str(root), "--run-id", "same"]) == cli.EXIT_OK
    fa, fb = _files(a), _files(b)
    assert fa == fb
    assert "simulate/same/figures/mean_trajectories.png" in fa
    assert "simulate/same/trajectories/seed_2.csv" in fa
    head = fa["simulate/same/trajectories/seed_0.csv"].decode().splitlines()[0]
    assert head == "t,mean,var,sup,probe_0,probe_1"


def test_jobs_do_not_change_results(tmp_path):
    cfg = _cfg(tmp_path, {"paths": 6, "orders": [2, 3]})
    cli.main(["bracket-check", "--config", cfg, "--out", str(tmp_path / "s"), "--run-id", "r"])
    cli.main(["bracket-check", "--config", cfg, "--out", str(tmp_path / "p"), "--run-id", "r", "--jobs", "4"])
    sa = _files(tmp_path / "s")
    sp = _files(tmp_path / "p")
    assert sa == sp and sa["bracket-check/r/results.csv"].count(b"\n") == 1 + 6 * 5


def test_seed_override_changes_output(tmp_path):
    cfg = _cfg(tmp_path, {"eps": 0.125, "seeds": 2, "horizon": 0.01})
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path), "--run-id", "a", "--no-figures"])
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path), "--run-id", "b", "--seed", "9", "--no-figures"])
    ra = (tmp_path / "simulate" / "a" / "results.csv").read_text()
    rb = (tmp_path / "simulate" / "b" / "results.csv").read_text()
    assert ra != rb and rb.splitlines()[1].startswith("9,")


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "jumpspde.cli", "exponents", "--out", str(tmp_path),
                           "--run-id", "c", "--no-figures"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip().splitlines()[-1].endswith(os.path.join("exponents", "c"))
