"""Treatment-effect posteriors, HPD-based covariate selection and subgroups."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .data import TrialDataset
from .emax import hill_fraction
from .priors import BLOCKS


@dataclass
class TreatmentEffectPosterior:
    """Delta_i(x_i, d) draws with shape (S, n, len(doses)) plus Emax_i draws (S, n)."""

    doses: np.ndarray
    draws: np.ndarray
    emax: np.ndarray

    def dose_index(self, d) -> int:
        hit = np.flatnonzero(np.isclose(self.doses, d, rtol=0, atol=1e-12))
        if hit.size == 0:
            raise ValueError(f"dose {d} was not among the computed doses {self.doses.tolist()}")
        return int(hit[0])

    def at(self, d) -> np.ndarray:
        """(S, n) draws at dose ``d``."""
        return self.draws[:, :, self.dose_index(d)]

    def median(self) -> np.ndarray:
        return np.median(self.draws, axis=0)

    def quantiles(self, qs=(0.025, 0.5, 0.975)) -> np.ndarray:
        return np.quantile(self.draws, qs, axis=0)


def patient_curve_draws(samples, x):
    """Per-draw, per-patient (E0, Emax, ED50, h) arrays from stored draws."""
    x = np.asarray(x, dtype=float)
    e0 = samples.column("alpha_e0")[:, None] + samples.block("beta") @ x.T
    emax = samples.column("alpha_emax")[:, None] + samples.block("gamma") @ x.T
    with np.errstate(over="ignore"):
        ed50 = np.exp(samples.column("alpha_log_ed50")[:, None] + samples.block("delta") @ x.T)
    h = samples.column("h")
    return e0, emax, ed50, h


def treatment_effect_draws(samples, data: TrialDataset, doses=None) -> TreatmentEffectPosterior:
    """Delta_i(x_i, d) = Emax_i d^h / (d^h + ED50_i^h) for every draw, patient and dose."""
    if samples.n_draws == 0:
        raise ValueError("empty posterior")
    doses = np.asarray(data.dose_levels if doses is None else doses, dtype=float)
    if np.any(doses < 0) or np.any(doses > data.d_max * (1 + 1e-12)):
        raise ValueError("doses must lie in [0, d_max]")
    _, emax, ed50, h = patient_curve_draws(samples, data.covariates)
    out = np.empty((samples.n_draws, data.n, doses.size))
    for j, d in enumerate(doses):
        if d == 0:
            out[:, :, j] = 0.0
        else:
            out[:, :, j] = emax * hill_fraction(d, ed50, h[:, None])
    return TreatmentEffectPosterior(doses, out, emax)


# ---------------------------------------------------------------------------
# HPD selection


def hpd_interval(draws, level: float = 0.5) -> tuple[float, float]:
    """Shortest window of ceil(level * S) sorted draws; ties go to the left."""
    x = np.sort(np.asarray(draws, dtype=float).ravel())
    s = x.size
    if s == 0:
        raise ValueError("no draws")
    m = max(1, math.ceil(level * s - 1e-12))
    widths = x[m - 1:] - x[:s - m + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + m - 1])


@dataclass
class Selection:
    """Per-coefficient and per-group HPD selection flags."""

    coefficient_flags: np.ndarray   # (3, p) bool, rows beta/gamma/delta
    intervals: np.ndarray           # (3, p, 2)
    group_flags: dict               # group -> {on_E0, on_Emax, on_ED50, predictive}
    level: float

    def predictive_groups(self) -> list:
        return [g for g, f in self.group_flags.items() if f["predictive"]]


MIN_HPD_DRAWS = 100


def select_predictive(samples, level: float = 0.5, group_index=None, group_names=None) -> Selection:
    """Flag coefficients whose level-HPD interval excludes 0.

    A group is predictive when any of its gamma or delta columns is flagged.
    Groups default to those recorded on ``samples`` (one per column if absent).
    """
    if samples.n_draws < MIN_HPD_DRAWS:
        raise ValueError(f"HPD selection needs at least {MIN_HPD_DRAWS} draws, got {samples.n_draws}")
    p = len(samples.column_names)
    flags = np.zeros((3, p), dtype=bool)
    iv = np.zeros((3, p, 2))
    for b, name in enumerate(BLOCKS):
        blk = samples.block(name)
        for j in range(p):
            lo, hi = hpd_interval(blk[:, j], level)
            iv[b, j] = lo, hi
            flags[b, j] = lo > 0 or hi < 0
    if group_index is None:
        group_index = getattr(samples, "group_index", None) or None
    if group_index is None:
        group_index = np.arange(p)
        group_names = list(samples.column_names)
    gi = np.asarray(group_index)
    if group_names is None:
        group_names = list(samples.group_names) or [str(g) for g in range(gi.max() + 1)]
    groups = {}
    for g, gname in enumerate(group_names):
        cols = gi == g
        e0, em, ed = (bool(flags[b, cols].any()) for b in range(3))
        groups[gname] = {"on_E0": e0, "on_Emax": em, "on_ED50": ed, "predictive": em or ed}
    return Selection(flags, iv, groups, level)


# ---------------------------------------------------------------------------
# subgroups


@dataclass
class SubgroupResult:
    psi: float
    omega: float
    d_star: float
    members: np.ndarray
    prob: np.ndarray

    @property
    def non_null(self) -> bool:
        return self.members.size > 0

    def to_dict(self) -> dict:
        return {"psi": self.psi, "omega": self.omega, "d_star": self.d_star,
                "non_null": self.non_null, "size": int(self.members.size),
                "members": self.members.tolist(), "prob": self.prob.tolist()}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def identify_subgroup(te: TreatmentEffectPosterior, d_star=None, psi: float = 0.2,
                      omega: float = 0.5) -> SubgroupResult:
    """Patients with P(Delta_i(d_star) > psi | y) > omega."""
    if not 0.5 <= omega <= 1:
        raise ValueError("omega must lie in [0.5, 1]")
    d_star = float(te.doses.max()) if d_star is None else float(d_star)
    prob = np.mean(te.at(d_star) > psi, axis=0)
    members = np.flatnonzero(prob > omega)
    return SubgroupResult(float(psi), float(omega), d_star, members, prob)


def subgroup_metrics(estimated, truth, n: int) -> dict:
    """Sensitivity, specificity, PPV, NPV; 0/0 ratios are None."""
    est = set(int(i) for i in estimated)
    tru = set(int(i) for i in truth)
    if not est <= set(range(n)) or not tru <= set(range(n)):
        raise ValueError("subgroup members must be patient indices in [0, n)")
    tp = len(est & tru)
    tn = n - len(est | tru)

    def ratio(a, b):
        return None if b == 0 else a / b

    return {"sens": ratio(tp, len(tru)), "spec": ratio(tn, n - len(tru)),
            "ppv": ratio(tp, len(est)), "npv": ratio(tn, n - len(est)),
            "size_true": len(tru), "size_est": len(est), "non_null": len(est) > 0}


def tree_summary_export(te: TreatmentEffectPosterior, data: TrialDataset, path, d_star=None) -> pd.DataFrame:
    """CSV of raw covariates, posterior median Delta at d_star and median Emax_i."""
    if te.draws.shape[0] == 0:
        raise ValueError("empty posterior")
    d_star = float(te.doses.max()) if d_star is None else float(d_star)
    raw = data.standardization.inverse(data.covariates) if data.p else np.zeros((data.n, 0))
    df = pd.DataFrame(raw, columns=list(data.column_names))
    df["median_effect"] = np.median(te.at(d_star), axis=0)
    df["median_emax"] = np.median(te.emax, axis=0)
    df.to_csv(path, index=False, float_format="%.17g")
    return df
