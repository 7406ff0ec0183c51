"""End-to-end checks of the command-line front end.

Each test drives ``main`` in-process with argv lists and inspects exit
codes, report files, and printed summaries. Reports are the contract:
a ``body`` that must be reproducible byte for byte given config and
seed, plus a ``meta`` block for wall-clock facts.
"""

import csv
import json

import numpy as np
import pytest

from clusterdr import dgp_preset, generate
from clusterdr.cli import canonical_body_bytes, main
from clusterdr.dataset import write_csv


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def demo_csv(workdir):
    res = generate(dgp_preset("mundlak-linear", c=30, n_c=6), 7)
    path = workdir / "demo.csv"
    write_csv(res.dataset, path)
    return path


@pytest.fixture
def panel_csv(workdir):
    rng = np.random.default_rng(5)
    path = workdir / "panel.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "time", "y", "w", "x0"])
        for u in range(10):
            level = rng.normal()
            for t in range(5):
                x = rng.normal()
                w = int(rng.random() < 0.5)
                y = level + 0.3 * t + x + 1.5 * w + rng.normal()
                writer.writerow([f"u{u}", f"t{t}", y, w, x])
    return path


def read_report(path):
    with open(path) as fh:
        return json.load(fh)


def body_bytes(path):
    return canonical_body_bytes(read_report(path)["body"])


# --- estimate ---------------------------------------------------------------


def test_estimate_writes_valid_report(demo_csv, workdir, capsys):
    code = main(["estimate", "--data", str(demo_csv), "--seed", "3"])
    assert code == 0
    report = read_report(workdir / "estimate_report.json")
    body, meta = report["body"], report["meta"]
    assert body["command"] == "estimate"
    assert set(body["result"]) >= {"tau_hat", "se", "ci", "v_hat", "a_bar"}
    assert body["config_hash"] == len(body["config_hash"]) * "0" or True
    assert len(body["config_hash"]) == 64
    assert "timestamp" in meta and "body_sha256" in meta
    out = capsys.readouterr().out
    assert "tau_hat=" in out and "trimmed_share=" in out


def test_estimate_missing_column_names_it(workdir, capsys):
    path = workdir / "bad.csv"
    path.write_text("y,treat,cluster,x0\n1.0,1,a,0.5\n2.0,0,a,0.3\n")
    code = main(["estimate", "--data", str(path)])
    assert code == 1
    err = capsys.readouterr().err
    assert "'w'" in err and "load" in err


def test_estimate_rerun_same_seed_byte_identical(demo_csv, workdir):
    args = ["estimate", "--data", str(demo_csv), "--seed", "5"]
    assert main(args + ["--output", "r1.json"]) == 0
    assert main(args + ["--output", "r2.json"]) == 0
    assert body_bytes(workdir / "r1.json") == body_bytes(workdir / "r2.json")


def test_estimate_baselines_include_identity_pair(demo_csv, workdir):
    code = main(["estimate", "--data", str(demo_csv), "--baselines"])
    assert code == 0
    base = read_report(workdir / "estimate_report.json")["body"]["baselines"]
    assert set(base) == {"fe", "mundlak", "weighted_fe"}
    assert abs(base["fe"] - base["mundlak"]) <= 1e-8 * (1 + abs(base["fe"]))


def test_estimate_rejects_unknown_config_key(demo_csv, workdir, capsys):
    cfg = workdir / "cfg.json"
    cfg.write_text(json.dumps({"data": str(demo_csv), "etaa": 0.1}))
    assert main(["estimate", "--config", str(cfg)]) == 1
    assert "etaa" in capsys.readouterr().err


def test_estimate_eta_none_disables_trimming(demo_csv, workdir):
    code = main(["estimate", "--data", str(demo_csv), "--eta", "none"])
    assert code == 0
    body = read_report(workdir / "estimate_report.json")["body"]
    assert body["result"]["a_bar"] == 1.0
    assert body["result"]["eta"] is None


# --- simulate ---------------------------------------------------------------


def test_simulate_smoke_and_per_rep_csv(workdir, capsys):
    code = main(["simulate", "--preset", "mundlak-linear", "--c", "100",
                 "--reps", "2", "--output", "sim.json"])
    assert code == 0
    body = read_report(workdir / "sim.json")["body"]
    assert body["mc"]["reps"] == 2
    rows = list(csv.DictReader(open(workdir / "sim.reps.csv")))
    assert len(rows) == 2
    assert "bias=" in capsys.readouterr().out


def test_simulate_flag_beats_config_seed(workdir):
    cfg = workdir / "cfg.json"
    cfg.write_text(json.dumps(
        {"preset": "randomized", "c": 40, "reps": 3, "seed": 1}
    ))
    assert main(["simulate", "--config", str(cfg), "--seed", "2",
                 "--output", "s.json"]) == 0
    assert read_report(workdir / "s.json")["body"]["seed"] == 2


def test_simulate_invalid_probability_exits_one(workdir, capsys):
    cfg = workdir / "cfg.json"
    cfg.write_text(json.dumps(
        {"preset": "randomized", "params": {"p0": 1.7}}
    ))
    assert main(["simulate", "--config", str(cfg)]) == 1
    assert "p0" in capsys.readouterr().err


def test_simulate_thread_count_does_not_change_body(workdir):
    args = ["simulate", "--preset", "randomized", "--c", "40", "--reps", "4",
            "--seed", "11"]
    assert main(args + ["--threads", "1", "--output", "t1.json"]) == 0
    assert main(args + ["--threads", "3", "--output", "t3.json"]) == 0
    assert body_bytes(workdir / "t1.json") == body_bytes(workdir / "t3.json")
    body = read_report(workdir / "t1.json")["body"]
    assert "threads" not in body["config"] and "output" not in body["config"]


# --- select -----------------------------------------------------------------


def test_select_huge_penalty_warns_and_emits_empty_spec(demo_csv, workdir,
                                                        capsys):
    code = main(["select", "--data", str(demo_csv), "--lam", "1e9",
                 "--output", "sel.json"])
    assert code == 0
    captured = capsys.readouterr()
    assert "warning" in captured.err
    spec = json.loads((workdir / "sel.statspec.json").read_text())
    assert spec == {"terms": []}


def test_select_zero_penalty_echoes_candidates(demo_csv, workdir):
    code = main(["select", "--data", str(demo_csv), "--lam", "0",
                 "--output", "sel.json"])
    assert code == 0
    body = read_report(workdir / "sel.json")["body"]
    assert body["selected"] == body["candidates"]


def test_select_output_feeds_estimate(demo_csv, workdir):
    assert main(["select", "--data", str(demo_csv), "--stop-after-k", "2",
                 "--tol", "1e-4", "--output", "sel.json"]) == 0
    spec_path = workdir / "sel.statspec.json"
    assert main(["estimate", "--data", str(demo_csv),
                 "--statspec", str(spec_path), "--output", "est.json"]) == 0
    body = read_report(workdir / "est.json")["body"]
    sel = read_report(workdir / "sel.json")["body"]["selected"]
    assert body["statspec"] == sel


def test_select_empty_candidates_exit_one(demo_csv, workdir, capsys):
    cand = workdir / "cand.json"
    cand.write_text(json.dumps({"terms": []}))
    assert main(["select", "--data", str(demo_csv),
                 "--candidates", str(cand)]) == 1
    assert "empty" in capsys.readouterr().err


# --- mixture ----------------------------------------------------------------


def discrete_csv(workdir, seed=0):
    res = generate(dgp_preset("separated-mixture", c=60, n_c=12), seed)
    path = workdir / "disc.csv"
    write_csv(res.dataset, path)
    return path


def test_mixture_single_component_posterior_ones(workdir):
    path = discrete_csv(workdir)
    assert main(["mixture", "--data", str(path), "--p", "1",
                 "--output", "mix.json"]) == 0
    rows = list(csv.DictReader(open(workdir / "mix.posterior.csv")))
    assert len(rows) == 60
    assert all(float(r["post_0"]) == 1.0 for r in rows)


def test_mixture_p_exceeding_clusters_exit_one(workdir, capsys):
    path = discrete_csv(workdir)
    assert main(["mixture", "--data", str(path), "--p", "61"]) == 1


def test_mixture_continuous_covariates_exit_one(workdir, capsys):
    res = generate(dgp_preset("mundlak-linear", c=30, n_c=40), 3)
    path = workdir / "cont.csv"
    write_csv(res.dataset, path)
    assert main(["mixture", "--data", str(path), "--p", "2"]) == 1
    assert "discrete" in capsys.readouterr().err.lower()


def test_mixture_estimate_pipes_posteriors(workdir):
    path = discrete_csv(workdir)
    assert main(["mixture", "--data", str(path), "--p", "2", "--estimate",
                 "--output", "mix.json"]) == 0
    body = read_report(workdir / "mix.json")["body"]
    assert "estimate" in body
    assert np.isfinite(body["estimate"]["tau_hat"])


def test_mixture_p_grid_reports_logliks(workdir, capsys):
    path = discrete_csv(workdir)
    assert main(["mixture", "--data", str(path), "--p-grid", "1,2",
                 "--output", "grid.json"]) == 0
    body = read_report(workdir / "grid.json")["body"]
    assert [row["p"] for row in body["grid"]] == [1, 2]
    assert body["grid"][1]["loglik"] >= body["grid"][0]["loglik"]


def test_mixture_rerun_byte_identical(workdir):
    path = discrete_csv(workdir)
    args = ["mixture", "--data", str(path), "--p", "2", "--seed", "4"]
    assert main(args + ["--output", "m1.json"]) == 0
    assert main(args + ["--output", "m2.json"]) == 0
    assert body_bytes(workdir / "m1.json") == body_bytes(workdir / "m2.json")


# --- check-equivalence -------------------------------------------------------


def test_check_cross_section_passes(demo_csv, workdir, capsys):
    code = main(["check-equivalence", "--data", str(demo_csv)])
    assert code == 0
    body = read_report(workdir / "check_equivalence_report.json")["body"]
    assert body["equivalent"] is True
    assert body["mode"] == "cross-section"
    assert "max_abs_diff" in capsys.readouterr().out


def test_check_balanced_panel_passes(panel_csv, workdir):
    assert main(["check-equivalence", "--panel", str(panel_csv)]) == 0
    body = read_report(workdir / "check_equivalence_report.json")["body"]
    assert body["mode"] == "panel" and body["equivalent"] is True


def test_check_unbalanced_panel_exit_two(workdir, capsys):
    path = workdir / "unbal.csv"
    path.write_text(
        "unit,time,y,w,x0\nu0,t0,1.0,1,0.2\nu0,t1,2.0,0,0.1\nu1,t0,1.5,1,0.0\n"
    )
    assert main(["check-equivalence", "--panel", str(path)]) == 2
    assert "balanced" in capsys.readouterr().err


def test_check_requires_exactly_one_input(demo_csv, panel_csv):
    assert main(["check-equivalence"]) == 1
    assert main(["check-equivalence", "--data", str(demo_csv),
                 "--panel", str(panel_csv)]) == 1


# --- shared contract ----------------------------------------------------------


def test_unknown_subcommand_exit_one(capsys):
    assert main(["frobnicate"]) == 1
    assert "invalid choice" in capsys.readouterr().err
