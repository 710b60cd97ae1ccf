"""Acceptance criteria 1-8; each test prints one PASS/FAIL line."""
import math
import time
import zlib

import numpy as np
import pytest

from doseshrink.calibration import calibrate_block, guesstimate_thresholds
from doseshrink.diagnostics import ess_bulk
from doseshrink.mcmc import MCMCConfig, run_chains
from doseshrink.model import make_kernel
from doseshrink.priors import BLOCKS, PriorSpec, coefficient_prior_logpdf, reg_scale, sample_prior, ShrinkageState
from doseshrink.simulation import ScenarioSpec, generate_trial, run_study
from doseshrink.subgroup import hpd_interval, identify_subgroup, subgroup_metrics, TreatmentEffectPosterior

from conftest import ALL_LABELS, conjugate_case, spec_for
from test_model import _masks, fd_error


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail
    return report


def test_criterion_1_calibration_table(verdict):
    th = guesstimate_thresholds(1.2, 0.17)
    table = {0.2: (0.030, 0.006, 0.026), 2 / 30: (0.006, 0.001, 0.005)}
    ok, parts, slowest = True, [], 0.0
    for family in ("horseshoe", "reg_horseshoe"):
        for phi, target in table.items():
            etas = []
            for i, b in enumerate(BLOCKS):
                t0 = time.perf_counter()
                r = calibrate_block(phi, *th[b], family=family, n_mc=1_000_000, seed=0, block=b, stream=i)
                slowest = max(slowest, time.perf_counter() - t0)
                etas.append(r.eta)
            ok &= all(abs(e / t - 1) <= 0.3 for e, t in zip(etas, target))
            parts.append(f"{family} phi={phi:.3g}: " + ", ".join(f"{e:.4f}" for e in etas))
    ok &= slowest < 120
    verdict(1, ok, "; ".join(parts) + f"; slowest block {slowest:.1f}s")


def test_criterion_2_dependent_spike_slab_marginals(verdict):
    spec = PriorSpec("spike_slab", True, phi=0.2, phi_inc=0.8)
    d = sample_prior(spec, 1, np.random.default_rng(2), 1_000_000)
    p_pred, p_prog = d.lambda_pred.mean(), d.lambda_prog.mean()
    ok = abs(p_pred - 0.2) <= 0.002 and abs(p_prog - 0.32) <= 0.002
    verdict(2, ok, f"P(pred) = {p_pred:.4f}, P(prog) = {p_prog:.4f}")


def test_criterion_3_gradient(verdict, example_data):
    from doseshrink.backend import available

    worst = {}
    for backend in available():
        for label in ALL_LABELS + ("oracle",):
            rng = np.random.default_rng(zlib.crc32(f"{label}/{backend}".encode()))
            if label == "oracle":
                spec = PriorSpec("oracle_mask", support=rng.random((3, example_data.p)) < 0.5)
            else:
                spec = spec_for(label)
            kern = make_kernel(example_data, spec, _masks(label, example_data, rng), backend=backend)
            errs = [fd_error(kern, rng.normal(0, 0.7, kern.dim)) for _ in range(20)]
            worst[f"{label}/{backend}"] = max(errs)
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    verdict(3, not bad, f"max rel err {max(worst.values()):.2e} over {len(worst)} family/backend pairs"
            + (f"; failing {bad}" if bad else ""))


def test_criterion_4_conjugate_oracle(verdict):
    data, spec, mean, sd = conjugate_case()
    s = run_chains(data, spec, MCMCConfig(chains=2, warmup=1000, draws=1000, seed=1))
    a = s.column("alpha_e0")
    ess = ess_bulk(s.by_chain()[:, :, s.index("alpha_e0")])
    mcse_mean, mcse_sd = sd / math.sqrt(ess), sd / math.sqrt(2 * ess)
    ok = abs(a.mean() - mean) < 3 * mcse_mean and abs(a.std(ddof=1) - sd) < 3 * mcse_sd
    verdict(4, ok, f"mean {a.mean():.5f} vs {mean:.5f} (3 MCSE {3 * mcse_mean:.5f}), "
                   f"sd {a.std(ddof=1):.5f} vs {sd:.5f} (3 MCSE {3 * mcse_sd:.5f})")


STUDY_MCMC = MCMCConfig(chains=2, warmup=500, draws=500)


@pytest.fixture(scope="module")
def table5_study():
    scen = [ScenarioSpec(s) for s in ("null", "only_pred", "prog_and_pred")]
    return run_study(scen, ["rhs", "rhs_dep"], reps=50, base_seed=2024, mcmc=STUDY_MCMC)


@pytest.fixture(scope="module")
def table8_extra(table5_study):
    etas = table5_study.aggregate["_settings"]["etas"]["10"]
    return run_study([ScenarioSpec("prog_and_pred")], ["hs_dep", "sas_dep"], reps=50, base_seed=2024,
                     mcmc=STUDY_MCMC, etas=etas)


@pytest.mark.slow
def test_criterion_5_selection_trends(verdict, table5_study):
    agg = table5_study.aggregate
    null_pred = {m: max(agg["null"][m]["predictive"].values()) for m in ("rhs", "rhs_dep")}
    a = all(v <= 0.05 for v in null_pred.values())
    x2 = {m: agg["only_pred"][m]["selection"]["Emax"]["x2"] for m in ("rhs", "rhs_dep")}
    b = all(v >= 0.75 for v in x2.values())
    dep, ind = (agg["prog_and_pred"][m]["selection"]["Emax"]["x2"] for m in ("rhs_dep", "rhs"))
    c = dep > ind
    fails = sum(agg[s][m]["failures"] for s in ("null", "only_pred", "prog_and_pred") for m in ("rhs", "rhs_dep"))
    verdict(5, a and b and c,
            f"(a) max null predictive freq {null_pred} {'ok' if a else 'FAIL'}; "
            f"(b) only_pred Emax x2 {x2} {'ok' if b else 'FAIL'}; "
            f"(c) prog_and_pred Emax x2 dep {dep:.2f} vs indep {ind:.2f} {'ok' if c else 'FAIL'}; "
            f"failed fits {fails}")


@pytest.mark.slow
def test_criterion_6_subgroup(verdict, table5_study, table8_extra):
    rng = np.random.default_rng(6)
    sizes = [generate_trial(ScenarioSpec("prog_and_pred"), rng).true_subgroup(0.2, 100).size for _ in range(400)]
    size_ok = abs(np.mean(sizes) - 175) <= 10
    specs = {m: table5_study.aggregate["prog_and_pred"][m]["subgroup"]["spec"] for m in ("rhs", "rhs_dep")}
    specs.update({m: table8_extra.aggregate["prog_and_pred"][m]["subgroup"]["spec"] for m in ("hs_dep", "sas_dep")})
    spec_ok = all(v is not None and v >= 0.85 for v in specs.values())
    verdict(6, size_ok and spec_ok, f"mean |S| = {np.mean(sizes):.1f}; specificity "
            + ", ".join(f"{m} {v:.3f}" for m, v in specs.items()))


def test_criterion_7_truth_quantiles(verdict):
    trial = generate_trial(ScenarioSpec("prog_and_pred", n=200_000), np.random.default_rng(7))
    qe = np.quantile(trial.truth.emax, [0.1, 0.9])
    qd = np.quantile(trial.truth.ed50, [0.1, 0.9])
    ok = abs(qe[0]) <= 0.02 and abs(qe[1] - 0.34) <= 0.02
    ok &= 5 * 0.85 <= qd[0] <= 5 * 1.15 and 80 * 0.85 <= qd[1] <= 80 * 1.15
    verdict(7, ok, f"Emax 10/90% = {qe[0]:.4f}, {qe[1]:.4f}; ED50 10/90% = {qd[0]:.2f}, {qd[1]:.2f}")


def test_criterion_8_invariants(verdict, small_data):
    rng = np.random.default_rng(8)
    checks = {}
    # exact-zero spike: an excluded coefficient must be exactly zero
    sas = PriorSpec("spike_slab", phi=0.2)
    sh = ShrinkageState([0.0], [1.0], c=np.ones(3))
    checks["spike exact zero"] = (coefficient_prior_logpdf(np.array([[1e-300], [0.3], [0.1]]), sh, sas) == -math.inf
                                  and math.isfinite(coefficient_prior_logpdf(np.array([[0.0], [0.3], [0.1]]), sh, sas)))
    # tau * lambda_tilde <= min(tau * lambda, c)
    tau, lam, c = (np.exp(rng.uniform(-12, 12, 100_000)) for _ in range(3))
    s = reg_scale(tau, lam, c)
    checks["reg horseshoe bound"] = bool(np.all(s <= np.minimum(tau * lam, c) * (1 + 1e-12)))
    # subgroup monotone in psi and omega
    draws = rng.normal(rng.normal(0.2, 0.15, 200), 0.1, (301, 200))
    te = TreatmentEffectPosterior(np.array([0.0, 100.0]), np.stack([0 * draws, draws], axis=2), draws)
    mono = True
    for lo, hi in zip(np.linspace(0, 0.5, 21)[:-1], np.linspace(0, 0.5, 21)[1:]):
        mono &= set(identify_subgroup(te, 100, hi).members) <= set(identify_subgroup(te, 100, lo).members)
    for lo, hi in zip(np.linspace(0.5, 1, 21)[:-1], np.linspace(0.5, 1, 21)[1:]):
        mono &= set(identify_subgroup(te, 100, 0.2, hi).members) <= set(identify_subgroup(te, 100, 0.2, lo).members)
    checks["subgroup monotone"] = mono
    # HPD mass in [level, level + 2/S] for distinct draws
    hpd = True
    for size in (3, 10, 101, 1000):
        x = rng.standard_normal(size)
        for level in (0.1, 0.5, 0.9):
            lo, hi = hpd_interval(x, level)
            frac = np.mean((x >= lo) & (x <= hi))
            hpd &= level <= frac <= level + 2 / size
    checks["HPD mass bound"] = hpd
    # bitwise determinism
    cfg = MCMCConfig(chains=2, warmup=100, draws=100, seed=8)
    a, b = (run_chains(small_data, spec_for("rhs_dep"), cfg) for _ in range(2))
    checks["determinism"] = bool(np.array_equal(a.draws, b.draws))
    # 0/0 cells are missing, not zero
    m = subgroup_metrics(set(), set(), 10)
    checks["0/0 metrics"] = m["sens"] is None and m["ppv"] is None and m["spec"] == 1 and m["npv"] == 1
    bad = [k for k, v in checks.items() if not v]
    verdict(8, not bad, "all invariants hold" if not bad else f"failing: {bad}")
