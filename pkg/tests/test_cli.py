import json
import shutil

import numpy as np
import pytest

from ccorbit.cli import CSV_SCHEMAS, EXIT_INFEASIBLE, EXIT_INPUT, main


def _csv_header(path):
    return path.read_text().splitlines()[0].split(",")


def test_missing_scenario_exits_1(tmp_path, capsys):
    assert main(["plan", "--scenario", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == EXIT_INPUT
    assert "error" in capsys.readouterr().err


def test_bad_override_exits_1(tmp_path, capsys):
    code = main(["plan", "--scenario", "cwh_rendezvous", "--out", str(tmp_path), "--set", "risk.eps_x=2.0"])
    assert code == EXIT_INPUT
    assert "risk.eps_x" in capsys.readouterr().err


def test_report_without_artifacts_exits_1(tmp_path):
    assert main(["report", str(tmp_path)]) == EXIT_INPUT


def test_plan_artifacts(cwh_cli_run):
    pd = json.loads((cwh_cli_run / "plan.json").read_text())
    assert pd["status"] == "optimal"
    assert np.isfinite(pd["J_ub_m_per_s"]) and pd["J_ub_m_per_s"] > 0
    assert max(pd["zeta"]) <= 1e-6
    for name in ("mean_trajectory.csv", "covariance_envelopes.csv", "histogram.csv"):
        assert _csv_header(cwh_cli_run / name) == CSV_SCHEMAS[name]["columns"]
    man = json.loads((cwh_cli_run / "manifest.json").read_text())
    assert set(man["outputs"]) >= {"plan.json", "mc_report.json", "histogram.csv"}
    assert man["seed"] == 7


def test_mc_report_contents(cwh_cli_run):
    rep = json.loads((cwh_cli_run / "mc_report.json").read_text())
    assert rep["n_samples"] == 1000 and rep["mode"] == "linear"
    assert rep["dv_quantiles_m_per_s"]["0.99"] <= rep["J_ub_m_per_s"]
    assert all(rep["checks"].values())


def test_seed_repeat_is_byte_identical(cwh_cli_run, tmp_path):
    shutil.copy(cwh_cli_run / "plan.json", tmp_path / "plan.json")
    shutil.copy(cwh_cli_run / "manifest.json", tmp_path / "manifest.json")
    assert main(["simulate", "--out", str(tmp_path), "--samples", "1000", "--seed", "7"]) == 0
    for name in ("mc_report.json", "histogram.csv"):
        assert (tmp_path / name).read_bytes() == (cwh_cli_run / name).read_bytes()


def test_scenario_hash_mismatch_exits_2(cwh_cli_run, tmp_path, capsys):
    shutil.copy(cwh_cli_run / "plan.json", tmp_path / "plan.json")
    code = main(["simulate", "--scenario", "cwh_rendezvous", "--plan", str(tmp_path / "plan.json"),
                 "--out", str(tmp_path), "--samples", "10", "--set", "risk.eps_x=0.01"])
    assert code == EXIT_INFEASIBLE
    assert "hash mismatch" in capsys.readouterr().err


def test_report_sections_and_tamper_warning(cwh_cli_run, tmp_path, capsys):
    assert main(["report", str(cwh_cli_run)]) == 0
    out = capsys.readouterr().out
    for line in ("== plan ==", "== Monte Carlo ==", "dV99", "discrete-time constraints met at nodes",
                 "terminal mean", "terminal covariance"):
        assert line in out
    assert "FAIL" not in out and "WARNING" not in out

    run = tmp_path / "run"
    shutil.copytree(cwh_cli_run, run)
    with open(run / "histogram.csv", "a") as fh:
        fh.write("9999,0.0\n")
    assert main(["report", "--out", str(run)]) == 0
    assert "WARNING: hash mismatch for histogram.csv" in capsys.readouterr().out


@pytest.mark.slow
def test_looser_state_risk_does_not_raise_cost(cwh_cli_run, tmp_path):
    assert main(["plan", "--scenario", "cwh_rendezvous", "--out", str(tmp_path),
                 "--set", "risk.eps_x=0.1"]) == 0
    loose = json.loads((tmp_path / "plan.json").read_text())["J_ub_m_per_s"]
    base = json.loads((cwh_cli_run / "plan.json").read_text())["J_ub_m_per_s"]
    assert loose <= base * (1 + 1e-4)


@pytest.mark.slow
def test_infeasible_plan_exits_2(tmp_path, capsys):
    code = main(["plan", "--scenario", "cwh_rendezvous", "--out", str(tmp_path),
                 "--set", "constraints.u_max_m_per_s=0.5"])
    assert code == EXIT_INFEASIBLE
    assert "control_magnitude" in capsys.readouterr().err
    pd = json.loads((tmp_path / "plan.json").read_text())
    assert pd["status"] == "infeasible"
    assert not (tmp_path / "mean_trajectory.csv").exists()
