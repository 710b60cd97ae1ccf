"""Synthetic trials, the replication harness and its performance metrics."""
from __future__ import annotations

import json
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .calibration import calibrate_block, guesstimate_thresholds
from .data import build_dataset
from .emax import DoseResponseParams, hill_fraction
from .mcmc import STREAM_REPLICATION, MCMCConfig, run_chains, stream_rng
from .priors import BLOCKS, PriorSpec
from .subgroup import identify_subgroup, select_predictive, subgroup_metrics, treatment_effect_draws

SCENARIOS = ("null", "only_prognostic", "prog_and_pred", "only_pred")
FORMS = ("table1", "linear", "logistic", "step", "interaction")
DOSE_GRID = (0.0, 12.5, 25.0, 50.0, 100.0)


def _logistic2(z):
    return 1.0 / (1.0 + np.exp(-2.0 * z))


def _step(z):
    return (np.asarray(z) > 0).astype(float)


def scenario_function_library(form: str, x):
    """(E0, Emax, ED50) of the non-linear study forms for covariates ``x``.

    ``x`` is a vector or an (n, k) matrix with k >= 3.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 3:
        raise ValueError("need at least 3 covariates")
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    if form == "linear":
        e0 = 1.2 + 0.1 * x1 + 0.1 * x2 + 0.05 * x3
        emax = 0.17 + 0.1 * x1 - 0.1 * x3
        ed50 = 20.0 * np.exp(-0.75 * x2 + 0.75 * x3)
    elif form == "logistic":
        e0 = 0.7 + 0.4 * _logistic2(x1) + 0.4 * _logistic2(x2) + 0.2 * _logistic2(x3)
        emax = 0.17 + 0.34 * _logistic2(x1) - 0.34 * _logistic2(x3)
        ed50 = 20.0 * np.exp(-2.0 * _logistic2(x2) + 2.0 * _logistic2(x3))
    elif form == "step":
        e0 = 1.2 + 0.1 * _step(x1) + 0.1 * _step(x2) + 0.05 * _step(x3)
        emax = 0.17 + 0.1 * _step(x1) - 0.1 * _step(x3)
        ed50 = 20.0 * np.exp(-0.75 * _step(x2) + 0.75 * _step(x3))
    elif form == "interaction":
        e0 = 1.2 + 0.1 * x1 + 0.1 * x2 + 0.05 * x3 + 0.2 * x1 * x2
        emax = 0.17 + 0.1 * x1 - 0.1 * x3 + 0.2 * x2 * x3
        ed50 = 20.0 * np.exp(-0.75 * x2 + 0.75 * x3 - x2 * x3)
    else:
        raise ValueError(f"unknown functional form {form!r}")
    return e0, emax, ed50


def scenario_truth(name: str, x):
    """(E0, Emax, ED50) of the four linear covariate-effect scenarios."""
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    zero = np.zeros(x.shape[:-1])
    prog = 1.2 + 0.1 * x1 + 0.1 * x2 + 0.05 * x3
    pred_emax = 0.17 + 0.1 * x2 - 0.1 * x3
    pred_ed50 = 20.0 * np.exp(-0.75 * x2 + 0.75 * x3)
    if name == "null":
        return 1.2 + zero, 0.17 + zero, 20.0 + zero
    if name == "only_prognostic":
        return prog, 0.17 + zero, 20.0 + zero
    if name == "prog_and_pred":
        return prog, pred_emax, pred_ed50
    if name == "only_pred":
        return 1.2 + zero, pred_emax, pred_ed50
    raise ValueError(f"unknown scenario {name!r}")


@dataclass(frozen=True)
class ScenarioSpec:
    """Generative truth of a simulated trial.

    ``form="table1"`` uses the four linear scenarios; the other forms select
    the non-linear study functions and require ``name="prog_and_pred"``.
    """

    name: str = "prog_and_pred"
    form: str = "table1"
    n: int = 500
    k: int = 10
    dose_grid: tuple = DOSE_GRID
    sigma: float = 0.25
    h: float = 1.0

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.name!r}")
        if self.form not in FORMS:
            raise ValueError(f"unknown form {self.form!r}")
        if self.form != "table1" and self.name != "prog_and_pred":
            raise ValueError("non-linear forms are defined for the prog_and_pred scenario only")
        if self.k < 3:
            raise ValueError("scenarios need k >= 3 covariates")
        if self.n % len(self.dose_grid):
            raise ValueError("n must be divisible by the number of dose levels")
        if self.dose_grid[0] != 0:
            raise ValueError("dose grid must start with placebo")

    @property
    def label(self) -> str:
        return self.name if self.form == "table1" else f"{self.name}:{self.form}"

    def truth(self, x):
        if self.form == "table1":
            return scenario_truth(self.name, x)
        return scenario_function_library(self.form, x)

    def oracle_support(self) -> np.ndarray:
        """(3, k) mask of covariates with a (linear part of a) true effect."""
        m = np.zeros((3, self.k), dtype=bool)
        if self.form == "table1":
            if self.name in ("only_prognostic", "prog_and_pred"):
                m[0, :3] = True
            if self.name in ("prog_and_pred", "only_pred"):
                m[1, [1, 2]] = True
                m[2, [1, 2]] = True
        else:
            m[0, :3] = True
            m[1, [0, 2]] = True
            m[2, [1, 2]] = True
            if self.form == "interaction":
                m[1, 1] = True
        return m

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["dose_grid"] = list(self.dose_grid)
        return d


@dataclass
class GeneratedTrial:
    data: object
    x: np.ndarray
    truth: DoseResponseParams

    def true_effects(self, doses) -> np.ndarray:
        """(n, len(doses)) true Delta_i(d)."""
        doses = np.asarray(doses, dtype=float)
        t = self.truth
        frac = np.column_stack([hill_fraction(d, t.ed50, t.h) if d > 0 else np.zeros(len(t.ed50))
                                for d in doses])
        return t.emax[:, None] * frac

    def true_subgroup(self, psi: float = 0.2, d: float = 100.0) -> np.ndarray:
        return np.flatnonzero(self.true_effects([d])[:, 0] > psi)


def generate_trial(spec: ScenarioSpec, rng) -> GeneratedTrial:
    """Simulate one trial: x ~ N(0, I_k), equal block allocation, normal responses."""
    n, k = spec.n, spec.k
    x = rng.standard_normal((n, k))
    dose = np.repeat(np.asarray(spec.dose_grid, dtype=float), n // len(spec.dose_grid))
    e0, emax, ed50 = spec.truth(x)
    mu = e0 + emax * hill_fraction(dose, ed50, spec.h)
    y = mu + spec.sigma * rng.standard_normal(n)
    data = build_dataset(dose, y, {f"x{j + 1}": x[:, j] for j in range(k)})
    truth = DoseResponseParams(np.asarray(e0), np.asarray(emax), np.asarray(ed50), spec.h, spec.sigma)
    return GeneratedTrial(data, x, truth)


def rmse_treatment_effects(predicted, truth, composition: str = "patients") -> float:
    """Average RMSE of treatment-effect predictions over patients and doses.

    ``predicted`` and ``truth`` are (n, doses).  The default composition takes
    the RMSE across doses per patient, then the mean over patients;
    ``"doses"`` swaps the roles.
    """
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    sq = (p - t) ** 2
    if composition == "patients":
        return float(np.mean(np.sqrt(sq.mean(axis=1))))
    if composition == "doses":
        return float(np.mean(np.sqrt(sq.mean(axis=0))))
    raise ValueError("composition must be 'patients' or 'doses'")


# ---------------------------------------------------------------------------
# replication harness


def calibrated_etas(k: int, family: str = "reg_horseshoe", e0_star=1.2, emax_star=0.17,
                    n_mc: int = 1_000_000, seed: int = 0) -> dict:
    """eta_beta, eta_gamma, eta_delta for phi = 2/k and the study guesstimates."""
    th = guesstimate_thresholds(e0_star, emax_star)
    out = {}
    for i, b in enumerate(BLOCKS):
        r = calibrate_block(2.0 / k, *th[b], family=family, n_mc=n_mc, seed=seed, block=b, stream=i)
        out[f"eta_{b}"] = r.eta
    return out


def resolve_method(method, scenario: ScenarioSpec, etas: dict | None = None) -> PriorSpec:
    """PriorSpec for a method label or spec; ``oracle`` takes the scenario support."""
    if isinstance(method, PriorSpec):
        spec = method
    elif method == "oracle":
        spec = PriorSpec(family="oracle_mask", support=scenario.oracle_support())
    else:
        spec = PriorSpec.from_label(method)
    if spec.family in ("horseshoe", "reg_horseshoe") and any(e is None for e in spec.etas):
        if not etas:
            raise ValueError(f"method {spec.label} needs global scales")
        spec = replace(spec, **{k: v for k, v in etas.items() if getattr(spec, k) is None})
    return spec


def method_label(method) -> str:
    return method.label if isinstance(method, PriorSpec) else str(method)


@dataclass(frozen=True)
class StudyTask:
    scenario: ScenarioSpec
    scenario_index: int
    method: object
    rep: int
    base_seed: int
    mcmc: MCMCConfig
    etas: dict | None
    psi: float = 0.2
    omega: float = 0.5
    d_star: float = 100.0


def trial_for(task: StudyTask) -> GeneratedTrial:
    """The paired dataset of a replication (same for every method)."""
    return generate_trial(task.scenario, stream_rng(task.base_seed, STREAM_REPLICATION, task.rep))


def run_replication(task: StudyTask) -> dict:
    """Fit one (scenario, method, rep) cell and compute its metrics."""
    sc = task.scenario
    row = {"scenario": sc.label, "method": method_label(task.method), "rep": task.rep}
    trial = trial_for(task)
    data = trial.data
    row["data_hash"] = data.fingerprint()
    active = [d for d in sc.dose_grid if d > 0]
    truth = trial.true_effects(active)
    true_sub = trial.true_subgroup(task.psi, task.d_star)
    row["size_true"] = int(true_sub.size)
    t0 = time.perf_counter()
    try:
        spec = resolve_method(task.method, sc, task.etas)
        cfg = replace(task.mcmc, seed=int(stream_rng(task.base_seed, STREAM_REPLICATION, task.rep)
                                           .integers(2 ** 31)))
        samples = run_chains(data, spec, cfg, threads=1)
        te = treatment_effect_draws(samples, data, np.asarray([0.0, *active]))
        pred = te.draws[:, :, 1:].mean(axis=0)
        row["rmse"] = rmse_treatment_effects(pred, truth)
        row["rmse_median"] = rmse_treatment_effects(np.median(te.draws[:, :, 1:], axis=0), truth)
        row["rmse_doses_first"] = rmse_treatment_effects(pred, truth, "doses")
        sel = select_predictive(samples)
        for b, bname in zip(range(3), ("E0", "Emax", "ED50")):
            for j, col in enumerate(data.column_names):
                row[f"sel_{bname}_{col}"] = bool(sel.coefficient_flags[b, j])
        for g, flags in sel.group_flags.items():
            row[f"pred_{g}"] = flags["predictive"]
        sub = identify_subgroup(te, task.d_star, task.psi, task.omega)
        m = subgroup_metrics(sub.members, true_sub, data.n)
        row.update(m)
        alphas = ("alpha_e0", "alpha_emax", "alpha_log_ed50")
        rh = [samples.diagnostics["rhat"].get(a) for a in alphas]
        row["max_rhat_alpha"] = max((r for r in rh if r is not None), default=float("nan"))
        row["divergences"] = samples.divergences
        row["failed"] = False
        row["error"] = ""
    except Exception as exc:  # recorded, never dropped
        row["failed"] = True
        row["error"] = f"{type(exc).__name__}: {exc}"
        row["traceback"] = traceback.format_exc(limit=3)
    row["seconds"] = time.perf_counter() - t0
    return row


@dataclass
class ReplicationReport:
    rows: pd.DataFrame
    aggregate: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        self.rows.to_csv(path, index=False)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.aggregate, indent=2, default=_json_default))

    def selection_frequency(self, scenario: str, method: str, column: str) -> float:
        df = self.rows[(self.rows.scenario == scenario) & (self.rows.method == method) & ~self.rows.failed]
        return float(df[column].astype(float).mean())


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return None if not np.isfinite(o) else float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o))


def _mean_or_none(s: pd.Series):
    s = pd.to_numeric(s, errors="coerce").dropna()
    return None if s.empty else float(s.mean())


def aggregate(rows: pd.DataFrame) -> dict:
    """Per (scenario, method) means mirroring the selection and subgroup tables.

    Subgroup ratios are averaged over replications where they are defined;
    the ``*_nonnull`` entries restrict to replications with a non-empty
    estimated subgroup.
    """
    out = {}
    # fixed reduction order makes the floating-point sums independent of row order
    rows = rows.sort_values(["scenario", "method", "rep"], kind="stable")
    for (sc, me), df in rows.groupby(["scenario", "method"], sort=True):
        ok = df[~df.failed.astype(bool)]
        entry = {"reps": int(len(df)), "failures": int(df.failed.astype(bool).sum())}
        if len(ok):
            entry["rmse_mean"] = _mean_or_none(ok["rmse"])
            entry["rmse_median_based_mean"] = _mean_or_none(ok["rmse_median"])
            entry["rmse_doses_first_mean"] = _mean_or_none(ok["rmse_doses_first"])
            sel = {}
            for bname in ("E0", "ED50", "Emax"):
                cols = [c for c in ok.columns if c.startswith(f"sel_{bname}_")]
                sel[bname] = {c[len(f"sel_{bname}_"):]: float(ok[c].astype(float).mean()) for c in cols}
            entry["selection"] = sel
            entry["predictive"] = {c[5:]: float(ok[c].astype(float).mean())
                                   for c in ok.columns if c.startswith("pred_")}
            nn = ok[ok.non_null.astype(bool)]
            sub = {}
            for key in ("sens", "spec", "ppv", "npv"):
                sub[key] = _mean_or_none(ok[key])
                sub[key + "_nonnull"] = _mean_or_none(nn[key]) if len(nn) else None
            sub["size_true"] = _mean_or_none(ok["size_true"])
            sub["size_est"] = _mean_or_none(ok["size_est"])
            sub["non_null"] = float(ok.non_null.astype(float).mean())
            entry["subgroup"] = sub
            entry["divergences_mean"] = _mean_or_none(ok["divergences"])
            entry["max_rhat_alpha"] = _mean_or_none(ok["max_rhat_alpha"])
        out.setdefault(sc, {})[me] = entry
    return out


def run_study(scenarios, methods, reps: int, base_seed: int = 0, mcmc: MCMCConfig | None = None,
              threads: int = 1, etas: dict | None = None, psi: float = 0.2, omega: float = 0.5,
              d_star: float = 100.0, progress=None) -> ReplicationReport:
    """Fit every (scenario, method, rep); datasets are paired across methods.

    Horseshoe methods without explicit scales get calibrated ones for each k.
    Rows are sorted by (scenario, method, rep) whatever the worker count.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    mcmc = mcmc or MCMCConfig(chains=2, warmup=500, draws=500)
    etas_by_k = {}
    tasks = []
    for si, sc in enumerate(scenarios):
        need = any(not isinstance(m, PriorSpec) and m.split("_")[0] in ("hs", "rhs") for m in methods)
        if etas is None and need and sc.k not in etas_by_k:
            etas_by_k[sc.k] = calibrated_etas(sc.k, seed=base_seed)
        e = etas if etas is not None else etas_by_k.get(sc.k)
        for me in methods:
            for r in range(reps):
                tasks.append(StudyTask(sc, si, me, r, base_seed, mcmc, e, psi, omega, d_star))
    if threads > 1:
        with ProcessPoolExecutor(threads) as ex:
            rows = []
            for row in ex.map(run_replication, tasks, chunksize=1):
                rows.append(row)
                if progress:
                    progress(row)
    else:
        rows = []
        for t in tasks:
            rows.append(run_replication(t))
            if progress:
                progress(rows[-1])
    df = pd.DataFrame(rows).sort_values(["scenario", "method", "rep"], kind="stable").reset_index(drop=True)
    agg = aggregate(df)
    agg["_settings"] = {"reps": reps, "base_seed": base_seed, "mcmc": mcmc.to_dict(), "psi": psi,
                        "omega": omega, "d_star": d_star,
                        "etas": etas if etas is not None else {str(k): v for k, v in etas_by_k.items()},
                        "scenarios": [s.to_dict() for s in scenarios],
                        "methods": [method_label(m) for m in methods]}
    return ReplicationReport(df, agg)
