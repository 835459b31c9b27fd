import contextlib
import io
import json
import math
import os

import numpy as np
import pytest

import npdag.cli as cli
from npdag.cli import main, read_records
from npdag.data import read_csv
from npdag.graph import Dag, read_dag, write_dag
from npdag.npvar import NumericalError


def run(*argv):
    """Run the CLI in-process; returns (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def gen(tmp, stem="data", **kw):
    args = ["generate", "--out", tmp, "--stem", stem]
    for k, v in kw.items():
        args += [f"--{k.replace('_', '-')}", v]
    code, out, err = run(*args)
    assert code == 0, err
    return os.path.join(tmp, f"{stem}.csv"), os.path.join(tmp, f"{stem}_truth.csv")


# --- generate -------------------------------------------------------------------

def test_generate_mc_sin(tmp_path):
    code, out, _ = run("generate", "--graph", "mc", "--model", "sin", "--d", 10, "--n", 1000,
                       "--sigma2", 0.5, "--seed", 7, "--out", tmp_path)
    assert code == 0
    files = json.loads(out)["files"]
    assert all(os.path.exists(p) for p in files.values()) and len(files) == 3
    ds = read_csv(files["data"])
    assert (ds.n, ds.d) == (1000, 10)
    assert len(read_dag(files["truth"]).edges) == 9
    man = json.load(open(files["manifest"]))
    assert man["seed"] == 7 and man["data_seed"] == 1007
    assert "finished_utc" not in man
    assert not list(tmp_path.glob("*.tmp*"))


def test_generate_er4_expected_edges(tmp_path):
    gen(str(tmp_path), graph="er4", d=20, n=50)
    man = json.load(open(tmp_path / "data_manifest.json"))
    assert man["expected_edges"] == 80


def test_generate_glm_is_binary(tmp_path):
    data, _ = gen(str(tmp_path), graph="mc", model="glm", p=0.3, d=5, n=200)
    assert set(np.unique(read_csv(data).values)) <= {0.0, 1.0}
    assert all(line.count(".") == 0 for line in open(data).read().splitlines()[1:])


def test_generate_named_model(tmp_path):
    data, truth = gen(str(tmp_path), model="exampleB1", sigma3=0.25, n=100)
    assert read_dag(truth).edges == {(0, 1), (1, 2)}
    man = json.load(open(tmp_path / "data_manifest.json"))
    assert man["noise"][2] == 0.25 and man["params"] == {"sigma3": 0.25}


def test_generate_infeasible_is_config_error(tmp_path):
    code, _, err = run("generate", "--graph", "er", "--d", 3, "--edges", 10, "--out", tmp_path)
    assert code == 2
    assert json.loads(err)["kind"] == "config"


# --- learn ----------------------------------------------------------------------

def test_learn_mc_sin_d5_preset(tmp_path):
    full = 0
    for s in range(20):
        data, _ = gen(str(tmp_path), stem=f"g{s}", graph="mc", model="sin", d=5, n=1000, seed=s)
        code, _, err = run("learn", "--data", data, "--preset", "benchmark", "--seed", s,
                           "--out", tmp_path, "--stem", f"l{s}")
        assert code == 0, err
        full += len(json.load(open(tmp_path / f"l{s}_result.json"))["layers"]) == 5
    assert full >= 18, full


def test_learn_huge_eta_single_layer(tmp_path):
    data, _ = gen(str(tmp_path), d=4, n=200)
    code, out, _ = run("learn", "--data", data, "--eta", "1e9", "--out", tmp_path)
    assert code == 0
    assert len(json.loads(out)["layers"]) == 1


@pytest.mark.parametrize("reg", ["knn", "kernel", "additive"])
def test_learn_regressors_produce_valid_results(tmp_path, reg):
    data, _ = gen(str(tmp_path), d=4, n=300, seed=2)
    code, _, _ = run("learn", "--data", data, "--regressor", reg, "--prune", "--out", tmp_path,
                     "--stem", reg)
    assert code == 0
    res = json.load(open(tmp_path / f"{reg}_result.json"))
    assert res["schema"] == 1
    assert sorted(x for layer in res["layers"] for x in layer) == ["X1", "X2", "X3", "X4"]
    assert res["config"]["npvar"]["spec"]["kind"].startswith(reg[:3])
    assert read_dag(tmp_path / f"{reg}_dag.csv").d == 4


def test_learn_then_evaluate_round_trip(tmp_path):
    data, truth = gen(str(tmp_path), d=5, n=1000, seed=1)
    assert run("learn", "--data", data, "--preset", "benchmark", "--prune", "--out", tmp_path)[0] == 0
    code, out, _ = run("evaluate", "--estimate", tmp_path / "learn_result.json", "--truth", truth,
                       "--out", tmp_path)
    assert code == 0
    assert json.loads(out) == {"schema": 1, "order_correct": True, "shd": 0}
    code, out, _ = run("evaluate", "--estimate", tmp_path / "learn_dag.csv", "--truth", truth,
                       "--out", tmp_path, "--stem", "dag")
    assert json.loads(out)["shd"] == 0


def test_learn_is_byte_identical(tmp_path):
    data, _ = gen(str(tmp_path), d=4, n=300, seed=5)
    for stem in ("a", "b"):
        assert run("learn", "--data", data, "--prune", "--out", tmp_path, "--stem", stem)[0] == 0
    assert (tmp_path / "a_result.json").read_bytes() == (tmp_path / "b_result.json").read_bytes()
    assert (tmp_path / "a_dag.csv").read_bytes() == (tmp_path / "b_dag.csv").read_bytes()
    gen(str(tmp_path / "again"), d=4, n=300, seed=5)
    assert (tmp_path / "again" / "data.csv").read_bytes() == open(data, "rb").read()
    assert ((tmp_path / "again" / "data_manifest.json").read_bytes()
            == (tmp_path / "data_manifest.json").read_bytes())


# --- evaluate --------------------------------------------------------------------

def _write(tmp_path, name, dag):
    p = tmp_path / name
    write_dag(dag, p)
    return p


def test_evaluate_examples(tmp_path):
    chain = Dag(3, frozenset({(0, 1), (1, 2)}))
    truth = _write(tmp_path, "truth.csv", chain)
    perfect = _write(tmp_path, "perfect.csv", chain)
    reverse = _write(tmp_path, "rev.csv", Dag(3, frozenset({(1, 0), (2, 1)})))
    assert json.loads(run("evaluate", "--estimate", perfect, "--truth", truth,
                          "--out", tmp_path)[1]) == {"schema": 1, "order_correct": True, "shd": 0}
    assert json.loads(run("evaluate", "--estimate", reverse, "--truth", truth,
                          "--out", tmp_path)[1]) == {"schema": 1, "order_correct": False, "shd": 2}


def test_evaluate_v_structure_orderings(tmp_path):
    truth = _write(tmp_path, "v.csv", Dag(3, frozenset({(0, 2), (1, 2)})))
    for order in (["X1", "X2", "X3"], ["X2", "X1", "X3"]):
        est = tmp_path / "ord.json"
        est.write_text(json.dumps({"ordering": order}))
        code, out, _ = run("evaluate", "--estimate", est, "--truth", truth, "--out", tmp_path)
        assert code == 0 and json.loads(out)["order_correct"] is True
        assert json.loads(out)["shd"] is None


def test_evaluate_dimension_mismatch(tmp_path):
    truth = _write(tmp_path, "t.csv", Dag(3))
    est = _write(tmp_path, "e.csv", Dag(2))
    code, _, err = run("evaluate", "--estimate", est, "--truth", truth, "--out", tmp_path)
    assert code == 3 and "mismatch" in json.loads(err)["message"]


# --- errors and configuration --------------------------------------------------------

def test_exit_codes(tmp_path, monkeypatch):
    assert run("learn", "--data", tmp_path / "missing.csv", "--out", tmp_path)[0] == 2
    assert run("learn", "--eta", "-1")[0] == 2
    assert run("bogus")[0] == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,x\n")
    code, _, err = run("learn", "--data", bad, "--out", tmp_path)
    assert code == 3
    payload = json.loads(err)
    assert payload["status"] == "error" and payload["type"] == "DataError"
    assert "row 2" in payload["message"]

    data, _ = gen(str(tmp_path), d=3, n=50)

    def boom(*a, **k):
        raise NumericalError("non-finite residual variance")

    monkeypatch.setattr(cli, "npvar_layers", boom)
    code, _, err = run("learn", "--data", data, "--out", tmp_path)
    assert code == 4 and json.loads(err)["kind"] == "numerical"


def test_config_file_precedence(tmp_path):
    data, _ = gen(str(tmp_path), d=4, n=200)
    conf = tmp_path / "run.ini"
    conf.write_text(f"[learn]\ndata = {data}\neta = 0.2\nregressor = knn\n")
    code, out, _ = run("learn", "--config", conf, "--out", tmp_path)
    assert code == 0 and json.loads(out)["eta_used"] == 0.2
    res = json.load(open(tmp_path / "learn_result.json"))
    assert res["config"]["npvar"]["spec"]["kind"] == "knn"
    code, out, _ = run("learn", "--config", conf, "--eta", 0.3, "--out", tmp_path)
    assert json.loads(out)["eta_used"] == 0.3
    conf.write_text("[learn]\nwhatever = 1\n")
    code, _, err = run("learn", "--config", conf)
    assert code == 2 and "unknown key" in json.loads(err)["message"]
    assert run("learn", "--config", tmp_path / "nope.ini")[0] == 2


def test_preset_overridden_by_flag(tmp_path):
    s = cli.resolve_settings(["learn", "--preset", "benchmark", "--regressor", "knn"])
    assert s["regressor"] == "knn" and s["disable_split"] is True
    s = cli.resolve_settings(["learn"])
    assert s["regressor"] == "kernel_smoother" and s["disable_split"] is False


def test_env_var_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("NPVAR_OUTPUT_DIR", str(tmp_path / "envout"))
    assert run("generate", "--d", 3, "--n", 20)[0] == 0
    assert (tmp_path / "envout" / "data.csv").exists()
    assert run("generate", "--d", 3, "--n", 20, "--out", tmp_path / "flag")[0] == 0
    assert (tmp_path / "flag" / "data.csv").exists()


# --- bench ---------------------------------------------------------------------------

BENCH = ["bench", "--graphs", "mc", "--models", "sin", "--ds", "4", "--ns", "100,200",
         "--seeds", "0-2", "--preset", "default"]


def test_bench_records_and_rates(tmp_path):
    code, out, _ = run(*BENCH, "--out", tmp_path)
    assert code == 0
    summary = json.loads(out)
    assert summary["records"] == summary["expected_records"] == 6
    report = json.load(open(tmp_path / "report.json"))
    assert len(report["settings"]) == 2
    for row in report["settings"]:
        assert 0 <= row["recovery_rate"] <= 1 and row["runs"] == 3
        assert row["shd_mean"] is not None
    assert len(read_records(str(tmp_path / "records.jsonl"))) == 6
    header = (tmp_path / "report.csv").read_text().splitlines()[0]
    assert "runtime" not in header
    assert (tmp_path / "timing.csv").exists()
    assert len(list((tmp_path / "cells").iterdir())) == 6


def test_bench_resume_matches_uninterrupted(tmp_path):
    whole, parts = tmp_path / "whole", tmp_path / "parts"
    assert run(*BENCH, "--methods", "npvar,eqvar,greedy", "--out", whole)[0] == 0
    code, out, _ = run(*BENCH, "--methods", "npvar,eqvar,greedy", "--out", parts, "--max-cells", 5)
    assert code == 0 and json.loads(out)["complete"] is False
    # a torn final line from a crash is skipped on resume
    with open(parts / "records.jsonl", "a") as fh:
        fh.write('{"setting": "mc-sin')
    assert run(*BENCH, "--methods", "npvar,eqvar,greedy", "--out", parts, "--jobs", 2)[0] == 0
    for name in ("report.json", "report.csv"):
        assert (whole / name).read_bytes() == (parts / name).read_bytes()
    assert json.load(open(parts / "report.json"))["records"] == 18


def test_bench_cell_failures_are_recorded(tmp_path):
    code, out, _ = run("bench", "--graphs", "er9", "--models", "sin", "--ds", "3", "--ns", "50",
                       "--seeds", "0", "--out", tmp_path)
    assert code == 0 and json.loads(out)["failures"] == 1
    rec = next(iter(read_records(str(tmp_path / "records.jsonl")).values()))
    assert rec["error"].startswith("ValueError")


def test_bench_unknown_method(tmp_path):
    assert run(*BENCH, "--methods", "pc", "--out", tmp_path)[0] == 2


def test_bench_plots(tmp_path):
    pytest.importorskip("matplotlib")
    assert run(*BENCH, "--plot", "--out", tmp_path)[0] == 0
    assert (tmp_path / "recovery_rate.svg").read_text().lstrip().startswith("<?xml")


# --- repro ---------------------------------------------------------------------------

def test_repro_table_preset(tmp_path):
    code, out, _ = run("repro", "appendixC_table", "--out", tmp_path)
    assert code == 0
    rep = json.loads(out)
    assert [v["var"] for v in rep["variances"]] == pytest.approx([1, 2, 6], abs=1e-9)
    ratios = sorted(r["log_ratio"] for r in rep["log_ratios"])
    expect = sorted(math.log(k) for k in (2, 2, 3, 3, 4, 4))
    assert ratios == pytest.approx(expect, abs=1e-9)
    assert rep["greedy_consistent"] is False and rep["population_order"] == [1, 2, 3]
    assert (tmp_path / "repro_appendixC_table.json").exists()


def test_repro_chain_preset(tmp_path):
    code, out, _ = run("repro", "exampleB1", "--out", tmp_path)
    assert code == 0
    cases = json.loads(out)["cases"]
    assert [c["identifiable"] for c in cases] == [True, False]
    for case in cases:
        assert all(abs(ch["z"]) <= 3 for ch in case["checks"])


def test_repro_small_curves(tmp_path):
    code, out, _ = run("repro", "misspec", "--seeds", "0-1", "--ns", "50,100", "--out", tmp_path)
    assert code == 0
    assert len(json.loads(out)["curves"]) == 4
    code, out, _ = run("repro", "camfail", "--seeds", "0", "--ns", "100", "--out", tmp_path)
    assert code == 0
    rows = json.loads(out)["curves"]
    assert len(rows) == len(cli.CAMFAIL_VARIANTS)
    assert (tmp_path / "repro_camfail.csv").read_text().startswith("variant,n,runs")


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "npdag", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("npdag ")
