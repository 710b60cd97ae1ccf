import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from doseshrink import cli
from doseshrink.mcmc import PosteriorSamples
from doseshrink.subgroup import patient_curve_draws

from conftest import example_frame

CONFIG = """
[run]
seed = 11

[data]
path = trial.csv
continuous = c1, c2, c3, c4
categorical = f1, f2, f3, f4, f5, f6

[prior]
family = rhs
dependent = true
eta_beta = auto
eta_gamma = auto
eta_delta = auto

[mcmc]
chains = 2
warmup = 150
draws = 100

[calibration]
n_mc = 100000
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    example_frame().to_csv(root / "trial.csv", index=False)
    (root / "run.ini").write_text(CONFIG)
    out = root / "out"
    codes = {cmd: cli.main([cmd, "--config", str(root / "run.ini"), "--out", str(out)])
             for cmd in ("fit", "subgroup", "report")}
    return root, out, codes


def test_fit_pipeline_exit_codes(run_dir):
    _, out, codes = run_dir
    assert codes == {"fit": 0, "subgroup": 0, "report": 0}
    for name in ("posterior.csv", "diagnostics.json", "summary.csv", "manifest.json", "config.ini",
                 "calibration.json", "selection.json", "subgroup.json", "tree_summary.csv",
                 "report_dose_means.csv", "report_patient_curves.csv"):
        assert (out / name).exists(), name


def test_manifest_records_resolved_scales(run_dir):
    _, out, _ = run_dir
    text = (out / "config.ini").read_text()
    assert "auto" not in text
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 11 and man["versions"]["doseshrink"]
    assert man["prior"]["eta_gamma"] == json.loads((out / "calibration.json").read_text())["eta"]["eta_gamma"]


def test_rerun_from_manifest_is_identical(run_dir, tmp_path):
    _, out, _ = run_dir
    again = tmp_path / "again"
    assert cli.main(["fit", "--config", str(out / "config.ini"), "--out", str(again)]) == 0
    for name in ("posterior.csv", "summary.csv", "diagnostics.json"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_summary_quantiles_match_sort_oracle(run_dir):
    _, out, _ = run_dir
    post = pd.read_csv(out / "posterior.csv")
    summ = pd.read_csv(out / "summary.csv").set_index("parameter")
    assert list(summ.columns[:7]) == ["mean", "sd", "q2.5", "q25", "q50", "q75", "q97.5"]
    for name in ("alpha_e0", "alpha_emax", "h", "gamma[c1]"):
        x = np.sort(post[name].to_numpy())
        for q in (0.025, 0.25, 0.5, 0.75, 0.975):
            pos = q * (x.size - 1)
            lo = int(np.floor(pos))
            hi = min(lo + 1, x.size - 1)
            oracle = x[lo] + (pos - lo) * (x[hi] - x[lo])
            assert summ.loc[name, f"q{100 * q:g}"] == pytest.approx(oracle, abs=1e-12)


def test_report_files(run_dir):
    root, out, _ = run_dir
    curves = pd.read_csv(out / "report_patient_curves.csv")
    assert (curves.groupby("patient").size() == 100).all() and curves.patient.nunique() == 270
    assert (curves.lower <= curves["median"]).all() and (curves["median"] <= curves.upper).all()
    means = pd.read_csv(out / "report_dose_means.csv")
    assert (means.lower <= means["mean"]).all() and (means["mean"] <= means.upper).all()
    assert means.n.sum() == 270
    # the d = 0 point is the posterior median of each patient's E0
    cfg = cli.load_config(root / "run.ini")
    data = cli._load_data(cfg)
    s = PosteriorSamples.from_csv(out / "posterior.csv", data.column_names)
    e0 = patient_curve_draws(s, data.covariates)[0]
    at0 = curves[curves.dose == 0].sort_values("patient")["median"].to_numpy()
    np.testing.assert_allclose(at0, np.median(e0, axis=0), rtol=0, atol=1e-10)
    assert "in_subgroup" in curves


def test_subgroup_outputs(run_dir):
    _, out, _ = run_dir
    sub = json.loads((out / "subgroup.json").read_text())
    assert sub["psi"] == 0.2 and sub["omega"] == 0.5 and sub["d_star"] == 100
    assert sub["size"] == len(sub["members"])
    sel = json.loads((out / "selection.json").read_text())
    assert set(sel["groups"]) == {"c1", "c2", "c3", "c4", "f1", "f2", "f3", "f4", "f5", "f6"}
    tree = pd.read_csv(out / "tree_summary.csv")
    assert tree.shape == (270, 14)


def test_missing_data_file_exit_2(tmp_path, capsys):
    (tmp_path / "run.ini").write_text("[data]\npath = nowhere.csv\n")
    code = cli.main(["fit", "--config", str(tmp_path / "run.ini"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "nowhere.csv" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path, capsys):
    assert cli.main(["fit", "--config", str(tmp_path / "none.ini")]) == 2
    assert "none.ini" in capsys.readouterr().err


def test_report_without_artifacts_exit_2(tmp_path, capsys):
    assert cli.main(["report", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "posterior.csv" in err and "simulation_reps.csv" in err


def test_convergence_failure_exit_1(run_dir, tmp_path, monkeypatch):
    _, out, _ = run_dir
    monkeypatch.setattr(cli, "RHAT_LIMIT", 0.5)
    bad = tmp_path / "bad"
    assert cli.main(["fit", "--config", str(out / "config.ini"), "--out", str(bad)]) == 1
    assert (bad / "diagnostics.json").exists() and (bad / "summary.csv").exists()


def test_prefit_and_calibrate(run_dir, tmp_path):
    root, _, _ = run_dir
    o = tmp_path / "pf"
    assert cli.main(["prefit", "--config", str(root / "run.ini"), "--out", str(o)]) == 0
    pf = json.loads((o / "prefit.json").read_text())
    assert set(pf["thresholds"]) == {"beta", "gamma", "delta"}
    assert pf["emax"] > 0
    assert cli.main(["calibrate", "--config", str(root / "run.ini"), "--out", str(o)]) == 0
    cal = json.loads((o / "calibration.json").read_text())
    assert cal["phi"] == pytest.approx(0.2)
    assert all(v > 0 for v in cal["eta"].values())


def test_simulate_and_report(tmp_path):
    ini = tmp_path / "sim.ini"
    ini.write_text("[simulation]\nscenarios = null, prog_and_pred:step\nmethods = oracle, null\n"
                   "reps = 2\nn = 100\nk = 3\n[mcmc]\nchains = 2\nwarmup = 100\ndraws = 100\n")
    out = tmp_path / "sim"
    assert cli.main(["simulate", "--config", str(ini), "--out", str(out), "--seed", "3"]) == 0
    reps = pd.read_csv(out / "simulation_reps.csv")
    assert len(reps) == 8 and not reps.failed.any()
    agg = json.loads((out / "simulation_aggregate.json").read_text())
    assert set(agg) == {"null", "prog_and_pred:step", "_settings"}
    assert cli.main(["report", "--out", str(out)]) == 0
    assert len(pd.read_csv(out / "report_rmse.csv")) == 8


def test_threads_precedence(monkeypatch):
    cfg = cli.RunConfig(threads=3)
    monkeypatch.setenv("DOSESHRINK_THREADS", "5")
    assert cli._threads(2, cfg) == 2
    assert cli._threads(None, cfg) == 3
    assert cli._threads(None, cli.RunConfig()) == 5
    monkeypatch.delenv("DOSESHRINK_THREADS")
    assert cli._threads(None, cli.RunConfig()) == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "doseshrink", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip().startswith("doseshrink")
