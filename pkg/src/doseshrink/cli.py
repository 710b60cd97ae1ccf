"""Command-line entry point: ``doseshrink <subcommand> --config run.ini``.

Exit codes: 0 success, 1 sampler or convergence failure, 2 input error.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import scipy
from scipy import stats

from . import __version__
from .backend import BACKEND
from .calibration import calibrate_block, guesstimate_thresholds
from .config import AUTO, ConfigError, RunConfig, load_config, serialize_config
from .data import ColumnSchema, DataError, TrialDataset, load_dataset
from .emax import hill_fraction, prefit
from .mcmc import STREAM_CALIBRATION, PosteriorSamples, SamplerError, run_chains
from .priors import BLOCKS
from .simulation import ScenarioSpec, run_study
from .subgroup import (identify_subgroup, patient_curve_draws, select_predictive, tree_summary_export,
                       treatment_effect_draws)

EXIT_OK, EXIT_SAMPLER, EXIT_INPUT = 0, 1, 2
RHAT_LIMIT = 1.05
ALPHAS = ("alpha_e0", "alpha_emax", "alpha_log_ed50")
SUMMARY_QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
CURVE_POINTS = 100


# ---------------------------------------------------------------------------
# helpers


def _threads(arg, cfg: RunConfig) -> int:
    if arg is not None:
        return max(1, int(arg))
    if cfg.threads is not None:
        return cfg.threads
    return max(1, int(os.environ.get("DOSESHRINK_THREADS", "1") or 1))


def _load_data(cfg: RunConfig) -> TrialDataset:
    if not cfg.data.path:
        raise ConfigError("[data] path is required")
    schema = ColumnSchema(cfg.data.dose, cfg.data.response, cfg.data.continuous, cfg.data.categorical)
    return load_dataset(cfg.data.path, schema, cfg.data.standardize)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o) if np.isfinite(o) else None
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def versions() -> dict:
    return {"doseshrink": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__, "backend": BACKEND}


def write_manifest(out: Path, command: str, cfg: RunConfig, **extra) -> None:
    """Resolved configuration plus versions; ``config.ini`` reruns the command."""
    (out / "config.ini").write_text(serialize_config(cfg))
    _write_json(out / "manifest.json", {"command": command, "seed": cfg.seed, "config": cfg.to_dict(),
                                        "versions": versions(), **extra})


def _guesstimates(cfg: RunConfig, data: TrialDataset | None):
    g = cfg.prior.guesstimates
    if g != "prefit":
        return tuple(g), None
    if data is None:
        raise ConfigError("guesstimates = prefit needs a [data] path")
    fit = prefit(data.dose, data.response, seed=cfg.seed)
    return (fit.e0, fit.emax), fit


def calibrated_scales(cfg: RunConfig, k: int, data: TrialDataset | None, family: str) -> tuple[dict, dict]:
    """Calibrate eta for each block; returns (etas, report)."""
    (e0, emax), fit = _guesstimates(cfg, data)
    th = guesstimate_thresholds(e0, emax)
    phi = cfg.calibration.phi if cfg.calibration.phi is not None else 2.0 / k
    fam = {"hs": "horseshoe", "rhs": "reg_horseshoe"}.get(family, family)
    blocks = {}
    for i, b in enumerate(BLOCKS):
        r = calibrate_block(phi, *th[b], family=fam, n_mc=cfg.calibration.n_mc, seed=cfg.seed,
                            eta_grid=(cfg.calibration.eta_lo, cfg.calibration.eta_hi), block=b, stream=i)
        blocks[b] = r.to_dict()
    etas = {f"eta_{b}": blocks[b]["eta"] for b in BLOCKS}
    report = {"family": fam, "phi": phi, "n_mc": cfg.calibration.n_mc, "guesstimates": [e0, emax],
              "stream": STREAM_CALIBRATION, "prefit": fit.to_dict() if fit else None,
              "blocks": blocks, "eta": etas}
    return etas, report


def posterior_summary(samples: PosteriorSamples) -> pd.DataFrame:
    """mean, sd and quantiles of every stored quantity, with R-hat and bulk ESS."""
    q = np.quantile(samples.draws, SUMMARY_QUANTILES, axis=0)
    df = pd.DataFrame({"parameter": samples.names, "mean": samples.draws.mean(axis=0),
                       "sd": samples.draws.std(axis=0, ddof=1) if samples.n_draws > 1 else np.nan})
    for qq, row in zip(SUMMARY_QUANTILES, q):
        df[f"q{100 * qq:g}"] = row
    df["rhat"] = [samples.diagnostics.get("rhat", {}).get(n) for n in samples.names]
    df["ess_bulk"] = [samples.diagnostics.get("ess_bulk", {}).get(n) for n in samples.names]
    return df


def _check_rhat(samples: PosteriorSamples) -> list:
    bad = []
    for a in ALPHAS:
        r = samples.diagnostics["rhat"].get(a)
        if r is not None and r > RHAT_LIMIT:
            bad.append((a, r))
    return bad


# ---------------------------------------------------------------------------
# subcommands


def cmd_calibrate(cfg: RunConfig, out: Path, threads: int) -> int:
    data = _load_data(cfg) if cfg.data.path else None
    k = cfg.calibration.k or (data.k if data is not None else None)
    if k is None and cfg.calibration.phi is None:
        raise ConfigError("calibration needs [calibration] phi, k or a data file")
    etas, report = calibrated_scales(cfg, k or 1, data, cfg.calibration.family)
    _write_json(out / "calibration.json", report)
    write_manifest(out, "calibrate", cfg)
    for b in BLOCKS:
        print(f"eta_{b} = {etas[f'eta_{b}']:.6g}")
    return EXIT_OK


def cmd_prefit(cfg: RunConfig, out: Path, threads: int) -> int:
    data = _load_data(cfg)
    fit = prefit(data.dose, data.response, seed=cfg.seed)
    res = fit.to_dict()
    res["thresholds"] = guesstimate_thresholds(fit.e0, fit.emax)
    _write_json(out / "prefit.json", res)
    write_manifest(out, "prefit", cfg, data_fingerprint=data.fingerprint())
    print(f"E0 = {fit.e0:.4g}, Emax = {fit.emax:.4g}, ED50 = {fit.ed50:.4g}, h = {fit.h:.4g}")
    return EXIT_OK


def cmd_fit(cfg: RunConfig, out: Path, threads: int) -> int:
    data = _load_data(cfg)
    extra = {"data_fingerprint": data.fingerprint()}
    if cfg.prior.needs_calibration:
        etas, report = calibrated_scales(cfg, data.k, data, cfg.prior.family)
        _write_json(out / "calibration.json", report)
        # record resolved scales so config.ini reruns without recalibrating
        cfg = replace(cfg, prior=replace(cfg.prior, **{k: v for k, v in etas.items()
                                                      if getattr(cfg.prior, k) == AUTO}))
    spec = cfg.prior.to_spec()
    extra["prior"] = spec.resolved(data.k, data.d_max).to_dict()
    write_manifest(out, "fit", cfg, **extra)
    samples = run_chains(data, spec, cfg.mcmc_config(), threads=threads)
    samples.to_csv(out / "posterior.csv")
    samples.write_diagnostics(out / "diagnostics.json")
    posterior_summary(samples).to_csv(out / "summary.csv", index=False, float_format="%.17g")
    bad = _check_rhat(samples)
    if bad:
        msg = ", ".join(f"{a} = {r:.3f}" for a, r in bad)
        print(f"convergence failure: R-hat > {RHAT_LIMIT} for {msg}", file=sys.stderr)
        return EXIT_SAMPLER
    print(f"wrote {samples.n_draws} draws to {out / 'posterior.csv'} "
          f"({samples.divergences} divergent transitions)")
    return EXIT_OK


def _load_fit(cfg: RunConfig, out: Path):
    need = [out / "posterior.csv", out / "manifest.json"]
    missing = [str(p) for p in need if not p.exists()]
    if missing:
        raise FileNotFoundError("missing fit artifacts: " + ", ".join(missing))
    data = _load_data(cfg)
    samples = PosteriorSamples.from_csv(out / "posterior.csv", data.column_names, data.group_names,
                                        tuple(int(g) for g in data.group_index))
    return data, samples


def cmd_subgroup(cfg: RunConfig, out: Path, threads: int) -> int:
    data, samples = _load_fit(cfg, out)
    sg = cfg.subgroup
    d_star = data.d_max if sg.d_star is None else sg.d_star
    te = treatment_effect_draws(samples, data, np.unique(np.r_[data.dose_levels, d_star]))
    sel = select_predictive(samples, sg.level)
    _write_json(out / "selection.json", {
        "level": sg.level, "groups": sel.group_flags,
        "coefficients": {b: {c: {"flag": bool(sel.coefficient_flags[i, j]),
                                 "hpd": sel.intervals[i, j].tolist()}
                             for j, c in enumerate(data.column_names)}
                         for i, b in enumerate(BLOCKS)}})
    res = identify_subgroup(te, d_star, sg.psi, sg.omega)
    res.write_json(out / "subgroup.json")
    tree_summary_export(te, data, out / "tree_summary.csv", d_star)
    print(f"subgroup size {res.members.size} of {data.n}; predictive: "
          f"{', '.join(sel.predictive_groups()) or 'none'}")
    return EXIT_OK


def _scenario(token: str, n: int, k: int) -> ScenarioSpec:
    name, _, form = token.partition(":")
    return ScenarioSpec(name, form or "table1", n=n, k=k)


def cmd_simulate(cfg: RunConfig, out: Path, threads: int) -> int:
    sim = cfg.simulation
    scen = [_scenario(t, sim.n, sim.k) for t in sim.scenarios]
    etas = None
    if all(getattr(cfg.prior, e) != AUTO for e in ("eta_beta", "eta_gamma", "eta_delta")):
        etas = {e: float(getattr(cfg.prior, e)) for e in ("eta_beta", "eta_gamma", "eta_delta")}
    write_manifest(out, "simulate", cfg)

    def progress(row):
        status = "failed" if row["failed"] else f"rmse {row['rmse']:.4f}"
        print(f"{row['scenario']} {row['method']} rep {row['rep']}: {status}", flush=True)

    rep = run_study(scen, list(sim.methods), sim.reps, cfg.seed, cfg.mcmc_config(), threads, etas,
                    cfg.subgroup.psi, cfg.subgroup.omega,
                    100.0 if cfg.subgroup.d_star is None else cfg.subgroup.d_star, progress)
    rep.to_csv(out / "simulation_reps.csv")
    rep.to_json(out / "simulation_aggregate.json")
    n_fail = int(rep.rows.failed.sum())
    if n_fail:
        print(f"{n_fail} failed replication(s) recorded", file=sys.stderr)
    return EXIT_OK


def observed_dose_means(data: TrialDataset, level: float = 0.9) -> pd.DataFrame:
    """Mean response per dose with a t-based confidence interval."""
    rows = []
    for d in data.dose_levels:
        y = data.response[data.dose == d]
        m, n = float(y.mean()), y.size
        half = stats.t.ppf(0.5 + level / 2, n - 1) * y.std(ddof=1) / np.sqrt(n) if n > 1 else np.nan
        rows.append({"dose": d, "n": n, "mean": m, "lower": m - half, "upper": m + half})
    return pd.DataFrame(rows)


def patient_curves(samples: PosteriorSamples, data: TrialDataset, n_points: int = CURVE_POINTS,
                   level: float = 0.9) -> pd.DataFrame:
    """Posterior median and interval of each patient's mean curve on a dose grid."""
    grid = np.linspace(0.0, data.d_max, n_points)
    e0, emax, ed50, h = patient_curve_draws(samples, data.covariates)
    lo, hi = 0.5 - level / 2, 0.5 + level / 2
    cols = {"median": [], "lower": [], "upper": []}
    for d in grid:
        mu = e0 + emax * hill_fraction(d, ed50, h[:, None]) if d > 0 else e0
        q = np.quantile(mu, [0.5, lo, hi], axis=0)
        cols["median"].append(q[0])
        cols["lower"].append(q[1])
        cols["upper"].append(q[2])
    for name in cols:
        cols[name] = np.stack(cols[name], axis=1).ravel()
    return pd.DataFrame({"patient": np.repeat(np.arange(data.n), n_points),
                         "dose": np.tile(grid, data.n), **cols})


def cmd_report(cfg: RunConfig, out: Path, threads: int) -> int:
    written = []
    if (out / "posterior.csv").exists():
        data, samples = _load_fit(cfg, out)
        observed_dose_means(data).to_csv(out / "report_dose_means.csv", index=False, float_format="%.17g")
        curves = patient_curves(samples, data)
        sub = out / "subgroup.json"
        if sub.exists():
            members = set(json.loads(sub.read_text())["members"])
            curves["in_subgroup"] = curves.patient.isin(members)
        curves.to_csv(out / "report_patient_curves.csv", index=False, float_format="%.17g")
        written += ["report_dose_means.csv", "report_patient_curves.csv"]
    if (out / "simulation_reps.csv").exists():
        reps = pd.read_csv(out / "simulation_reps.csv")
        cols = [c for c in ("scenario", "method", "rep", "rmse", "rmse_doses_first", "failed") if c in reps]
        reps[cols].to_csv(out / "report_rmse.csv", index=False, float_format="%.17g")
        written.append("report_rmse.csv")
    if not written:
        raise FileNotFoundError(f"no fit or simulation artifacts in {out}: expected posterior.csv "
                                "and manifest.json (fit) or simulation_reps.csv (simulate)")
    print("wrote " + ", ".join(written))
    return EXIT_OK


COMMANDS = {"calibrate": cmd_calibrate, "prefit": cmd_prefit, "fit": cmd_fit, "subgroup": cmd_subgroup,
            "simulate": cmd_simulate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="doseshrink", description="Bayesian sigmoid Emax models with "
                                 "shrinkage priors for predictive covariates.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, help="overrides [run] seed")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument("--threads", type=int, help="worker processes (default DOSESHRINK_THREADS or 1)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out=args.out)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, _threads(args.threads, cfg))
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SamplerError as exc:
        print(f"sampler failure: {exc}", file=sys.stderr)
        return EXIT_SAMPLER


if __name__ == "__main__":
    sys.exit(main())
