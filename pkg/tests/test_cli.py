import json
import subprocess
import sys

import pytest

from streamnas.cli import main
from streamnas.topology import DSConv1D, Dense, GlobalAvgPool, Topology, dumps

SMOKE = {
    "schema": "streamnas.config/1",
    "seed": 3,
    "dataset": {"n": 120, "width": 64, "seed": 0},
    "search": {"generations": 2, "children_per_generation": 4, "initial_random": 4},
    "train": {"epochs": 2},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def stages_file(tmp_path):
    return _write(tmp_path / "stages.json", {"schema": "streamnas.stages/1",
                                              "stages": [{"n_in": 3, "l": 2}, {"n_in": 4, "l": 5}]})


@pytest.fixture
def topo_file(tmp_path):
    t = Topology((DSConv1D(9, 2, 16), DSConv1D(5, 2, 8), GlobalAvgPool(), Dense(2)), 2, 64)
    p = tmp_path / "topo.json"
    p.write_text(dumps(t))
    return p


def test_cost_on_two_stage_pipeline(capsys, stages_file):
    code, out, err = run(capsys, "cost", stages_file)
    assert code == 0
    doc = json.loads(out)
    assert doc["report"]["t_total_cycles"] == 15 and doc["report"]["sigma"] == [2, 5]
    assert "t_total" in err


def test_simulate_reports_zero_deviation(capsys, stages_file, tmp_path):
    code, out, _ = run(capsys, "simulate", stages_file, "--out", tmp_path / "sim", "--trace")
    assert code == 0
    doc = json.loads(out)
    assert doc["relative_deviation"] == 0.0 and doc["simulation"]["total_cycles"] == 15
    trace = (tmp_path / "sim" / "trace.csv").read_text().splitlines()
    assert trace[0] == "cycle,stage,event" and len(trace) > 1


def test_simulate_trace_needs_out(capsys, stages_file):
    assert run(capsys, "simulate", stages_file, "--trace")[0] == 2


def test_cost_topology_with_unroll_strategies(capsys, topo_file, tmp_path):
    reports = {}
    for strategy in ("min", "max", "max_throughput"):
        code, out, _ = run(capsys, "cost", topo_file, "--unroll", strategy)
        assert code == 0
        reports[strategy] = json.loads(out)["report"]
    assert reports["max"]["E_total"] <= reports["min"]["E_total"]
    assert reports["max_throughput"]["t_total_cycles"] <= reports["min"]["t_total_cycles"]
    bad = _write(tmp_path / "u.json", {"layers": [{"alpha_pe": 1, "alpha_simd": 1}]})
    code, _, err = run(capsys, "cost", topo_file, "--unroll", bad)
    assert code == 2 and "layers" in err


def test_parse_errors_exit_2(capsys, tmp_path):
    assert run(capsys, "cost", tmp_path / "missing.json")[0] == 2
    (tmp_path / "junk.json").write_text("{")
    assert run(capsys, "cost", tmp_path / "junk.json")[0] == 2
    bad = _write(tmp_path / "s.json", {"schema": "streamnas.stages/1", "stages": [{"n_in": 3}]})
    code, _, err = run(capsys, "cost", bad)
    assert code == 2 and "'l'" in err


def test_runtime_failure_exit_1(capsys, tmp_path):
    doc = {"schema": "streamnas.stages/1", "stages": [{"n_in": 1, "l": 1}, {"n_in": 6, "l": 1}]}
    assert run(capsys, "simulate", _write(tmp_path / "s.json", doc), "--fifo-depth", "2")[0] == 1


def test_eval_then_profile(capsys, topo_file, tmp_path):
    code, out, _ = run(capsys, "eval", topo_file, "--epochs", "3", "--out", tmp_path / "ev")
    assert code == 0
    m = json.loads(out)
    assert 0 <= m["validation"]["detection_rate"] <= 1
    code, out, _ = run(capsys, "profile", tmp_path / "ev" / "model.snp", "--bits", "32", "16",
                       "--out", tmp_path / "pr")
    assert code == 0
    drift = {r["total_bits"]: r["accuracy_drift"] for r in json.loads(out)["drift"]}
    assert drift[32] <= 1e-3
    assert (tmp_path / "pr" / "formats_16.json").exists()
    assert (tmp_path / "pr" / "drift.csv").read_text().startswith("total_bits,")


def test_search_smoke_and_reproducibility(capsys, tmp_path):
    cfg = _write(tmp_path / "smoke.json", SMOKE)
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "search", "--config", cfg, "--out", tmp_path / name)
        assert code == 0
        outs.append(json.loads(out))
    a, b = tmp_path / "a", tmp_path / "b"
    front = (a / "front.csv").read_text().splitlines()
    assert len(front) >= 2
    for f in ("front.csv", "archive.json", "summary.csv", "checkpoints/gen_0002.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    assert outs[0] == outs[1]
    log = (a / "run_log.jsonl").read_text().splitlines()
    assert all("started" in json.loads(l) for l in log)


def test_search_rerun_in_same_directory_is_identical(capsys, tmp_path):
    cfg = _write(tmp_path / "smoke.json", SMOKE)
    run(capsys, "search", "--config", cfg, "--out", tmp_path / "o")
    first = (tmp_path / "o" / "front.csv").read_bytes()
    lines = len((tmp_path / "o" / "run_log.jsonl").read_text().splitlines())
    run(capsys, "search", "--config", cfg, "--out", tmp_path / "o")
    assert (tmp_path / "o" / "front.csv").read_bytes() == first
    assert len((tmp_path / "o" / "run_log.jsonl").read_text().splitlines()) == lines


def test_invalid_grid_writes_nothing(capsys, tmp_path):
    cfg = _write(tmp_path / "bad.json", {**SMOKE, "space": {"conv_filters": [0, 4]}})
    code, out, err = run(capsys, "search", "--config", cfg, "--out", tmp_path / "out")
    assert code == 2 and "conv_filters" in err and out == ""
    assert not (tmp_path / "out").exists()


def test_unknown_config_keys_rejected(capsys, tmp_path):
    for doc, field in (({**SMOKE, "serach": {}}, "serach"),
                       ({**SMOKE, "search": {"generation": 3}}, "generation"),
                       ({**SMOKE, "schema": "other/9"}, "schema")):
        code, _, err = run(capsys, "search", "--config", _write(tmp_path / "c.json", doc), "--out", tmp_path / "x")
        assert code == 2 and field in err


def test_console_script_and_log_level(tmp_path, stages_file):
    env = {"HALF_LOG": "DEBUG", "PATH": "/usr/bin:/bin:/usr/local/bin"}
    p = subprocess.run([sys.executable, "-m", "streamnas.cli", "cost", str(stages_file)],
                       capture_output=True, text=True, env=env)
    assert p.returncode == 0
    assert json.loads(p.stdout)["report"]["t_total_cycles"] == 15
