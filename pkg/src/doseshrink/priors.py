"""Shrinkage prior families: specification, log densities and exact samplers."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import special

FAMILIES = ("spike_slab", "horseshoe", "reg_horseshoe", "flat", "null", "oracle_mask")
SHRINKAGE_FAMILIES = ("spike_slab", "horseshoe", "reg_horseshoe")
BLOCKS = ("beta", "gamma", "delta")

# short labels used in reports
_LABELS = {"spike_slab": "sas", "horseshoe": "hs", "reg_horseshoe": "rhs",
           "flat": "noshrink", "null": "null", "oracle_mask": "oracle"}
_FROM_LABEL = {v: k for k, v in _LABELS.items()}

_DEFAULT_SLAB = {"spike_slab": (0.5, 0.5), "reg_horseshoe": (2.0, 2.0)}


@dataclass(frozen=True)
class PriorSpec:
    """Prior family and hyperparameters.

    ``phi=None`` means 2/k; ``slab_a``/``slab_b`` default to InvGamma(0.5, 0.5)
    for spike-and-slab and InvGamma(2, 2) for the regularized horseshoe.
    ``support`` is the (3, p) boolean mask of the oracle family.
    """

    family: str = "reg_horseshoe"
    dependent: bool = False
    phi: float | None = None
    phi_inc: float = 0.8
    eta_beta: float | None = None
    eta_gamma: float | None = None
    eta_delta: float | None = None
    slab_a: float | None = None
    slab_b: float | None = None
    nu_a: float = 0.82
    nu_b: float = 3.5
    xi_a: float = 0.93
    xi_b: float = 1.4
    sigma_e0: float = 100.0
    sigma_emax: float = 100.0
    sigma_a: float = 0.01
    sigma_b: float = 0.01
    d_max: float | None = None
    support: tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown prior family {self.family!r}")
        if self.dependent and self.family not in SHRINKAGE_FAMILIES:
            raise ValueError(f"family {self.family!r} has no dependent variant")
        if self.family == "oracle_mask" and self.support is None:
            raise ValueError("oracle_mask family needs a support mask")
        if self.support is not None:
            mask = np.asarray(self.support, dtype=bool)
            if mask.ndim != 2 or mask.shape[0] != 3:
                raise ValueError("support must have shape (3, p)")
            object.__setattr__(self, "support", tuple(tuple(bool(v) for v in row) for row in mask))
        if self.phi is not None and not 0 < self.phi < 1:
            raise ValueError("phi must lie in (0, 1)")
        if self.phi is not None and self.dependent and not self.phi < self.phi_inc <= 1:
            raise ValueError("need phi < phi_inc <= 1")
        for name in ("eta_beta", "eta_gamma", "eta_delta"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        if self.slab_a is None and self.family in _DEFAULT_SLAB:
            a, b = _DEFAULT_SLAB[self.family]
            object.__setattr__(self, "slab_a", a)
            object.__setattr__(self, "slab_b", b if self.slab_b is None else self.slab_b)

    @property
    def label(self) -> str:
        base = _LABELS[self.family]
        return base + "_dep" if self.dependent else base

    @classmethod
    def from_label(cls, label: str, **kw) -> "PriorSpec":
        """Build from a short method name such as ``rhs_dep`` or ``oracle``."""
        dep = label.endswith("_dep")
        base = label[:-4] if dep else label
        family = _FROM_LABEL.get(base, base)
        return cls(family=family, dependent=dep, **kw)

    @property
    def etas(self) -> tuple:
        return (self.eta_beta, self.eta_gamma, self.eta_delta)

    def resolved(self, k: int, d_max: float | None = None) -> "PriorSpec":
        """Fill data-dependent defaults (phi = 2/k, d_max)."""
        upd = {}
        if self.phi is None and self.family == "spike_slab":
            upd["phi"] = min(2.0 / k, 0.5) if k > 0 else 0.5
        if d_max is not None and self.d_max is None:
            upd["d_max"] = float(d_max)
        out = replace(self, **upd) if upd else self
        if out.family in ("horseshoe", "reg_horseshoe") and any(e is None for e in out.etas):
            raise ValueError("horseshoe families need eta_beta, eta_gamma and eta_delta "
                             "(set them or run calibration)")
        return out

    def structural_mask(self, p: int) -> np.ndarray:
        """(3, p) 0/1 mask of coefficients that exist in the model."""
        if self.family == "null":
            return np.zeros((3, p))
        if self.family == "oracle_mask":
            m = np.asarray(self.support, dtype=float)
            if m.shape != (3, p):
                raise ValueError(f"support mask has shape {m.shape}, data needs (3, {p})")
            return m
        return np.ones((3, p))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["support"] = None if self.support is None else [list(r) for r in self.support]
        return d


@dataclass
class ShrinkageState:
    """Latent shrinkage variables; lambdas are per group (length k).

    For spike-and-slab the lambdas are 0/1 indicators and ``tau`` is unused.
    """

    lambda_prog: np.ndarray
    lambda_pred: np.ndarray
    tau: np.ndarray = field(default_factory=lambda: np.ones(3))
    c: np.ndarray = field(default_factory=lambda: np.ones(3))
    lambda_star: np.ndarray | None = None

    def __post_init__(self):
        self.lambda_prog = np.asarray(self.lambda_prog, dtype=float)
        self.lambda_pred = np.asarray(self.lambda_pred, dtype=float)
        self.tau = np.asarray(self.tau, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        if self.lambda_star is not None:
            self.lambda_star = np.asarray(self.lambda_star, dtype=float)

    def column_lambdas(self, group_index) -> np.ndarray:
        """(3, p) local scale per coefficient; gamma and delta share lambda_pred."""
        gi = np.asarray(group_index)
        return np.vstack([self.lambda_prog[gi], self.lambda_pred[gi], self.lambda_pred[gi]])


def dependent_coupling(lambda_star, lambda_pred):
    """Prognostic local scale of the dependent horseshoe: elementwise max."""
    return np.maximum(lambda_star, lambda_pred)


def reg_scale(tau, lam, c):
    """Regularized horseshoe effective sd tau * lambda_tilde.

    Equals c tau lam / sqrt(c^2 + tau^2 lam^2), evaluated on the log scale.
    """
    tau, lam, c = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (tau, lam, c)))
    a = np.log(tau) + np.log(lam)
    return np.exp(a - 0.5 * np.logaddexp(0.0, 2.0 * (a - np.log(c))))


def effective_scales(shrink: ShrinkageState, spec: PriorSpec, group_index) -> np.ndarray:
    """(3, p) prior sd of each coefficient given the latents (0 where excluded)."""
    lam = shrink.column_lambdas(group_index)
    tau = shrink.tau[:, None]
    c = shrink.c[:, None]
    fam = spec.family
    if fam == "spike_slab":
        return np.broadcast_to(c, lam.shape) * lam
    if fam == "horseshoe":
        return tau * lam
    if fam == "reg_horseshoe":
        return reg_scale(tau, lam, c)
    raise ValueError(f"family {fam!r} has no shrinkage scales")


def _half_cauchy_logpdf(x, scale=1.0):
    x = np.asarray(x, dtype=float)
    return np.where(x > 0, math.log(2.0 / math.pi) - np.log(scale) - np.log1p((x / scale) ** 2), -np.inf)


def _invgamma_logpdf(x, a, b):
    x = np.asarray(x, dtype=float)
    return a * math.log(b) - special.gammaln(a) - (a + 1) * np.log(x) - b / x


def _bernoulli_logpmf(ind, prob):
    ind = np.asarray(ind)
    return np.where(ind > 0, np.log(prob), np.log1p(-prob))


def indicator_log_prior(lambda_prog, lambda_pred, spec: PriorSpec) -> float:
    """Log prior mass of spike-and-slab indicators (independent or dependent)."""
    phi = spec.phi
    lp = float(np.sum(_bernoulli_logpmf(lambda_pred, phi)))
    if spec.dependent:
        pstar = np.where(np.asarray(lambda_pred) > 0, spec.phi_inc, phi)
        lp += float(np.sum(_bernoulli_logpmf(lambda_prog, pstar)))
    else:
        lp += float(np.sum(_bernoulli_logpmf(lambda_prog, phi)))
    return lp


def coefficient_prior_logpdf(coeffs, shrink: ShrinkageState, spec: PriorSpec, group_index=None) -> float:
    """log p(beta, gamma, delta, latents) under ``spec``.

    ``coeffs`` is a :class:`~doseshrink.emax.CoefficientSet` or a (3, p)
    array.  ``group_index`` defaults to one group per column.  Flat families
    contribute 0 (or -inf when a masked coefficient is nonzero).
    """
    b = coeffs.stacked() if hasattr(coeffs, "stacked") else np.asarray(coeffs, dtype=float).reshape(3, -1)
    p = b.shape[1]
    gi = np.arange(p) if group_index is None else np.asarray(group_index)
    fam = spec.family
    if fam in ("flat", "null", "oracle_mask"):
        mask = spec.structural_mask(p)
        return -math.inf if np.any(b[mask == 0] != 0) else 0.0

    if fam == "spike_slab":
        ind = shrink.column_lambdas(gi) > 0
        if np.any(b[~ind] != 0):
            return -math.inf
        s = np.broadcast_to(shrink.c[:, None], b.shape)
        lp = float(np.sum(-0.5 * np.log(2 * math.pi) - np.log(s[ind]) - 0.5 * (b[ind] / s[ind]) ** 2))
        lp += indicator_log_prior(shrink.lambda_prog, shrink.lambda_pred, spec)
        lp += float(np.sum(_invgamma_logpdf(shrink.c, spec.slab_a, spec.slab_b)))
        return lp

    s = effective_scales(shrink, spec, gi)
    lp = float(np.sum(-0.5 * np.log(2 * math.pi) - np.log(s) - 0.5 * (b / s) ** 2))
    if spec.dependent:
        if shrink.lambda_star is None:
            raise ValueError("dependent horseshoe needs lambda_star")
        if not np.allclose(shrink.lambda_prog, dependent_coupling(shrink.lambda_star, shrink.lambda_pred)):
            return -math.inf
        lp += float(np.sum(_half_cauchy_logpdf(shrink.lambda_star)))
    else:
        lp += float(np.sum(_half_cauchy_logpdf(shrink.lambda_prog)))
    lp += float(np.sum(_half_cauchy_logpdf(shrink.lambda_pred)))
    lp += float(np.sum(_half_cauchy_logpdf(shrink.tau, np.asarray(spec.etas, dtype=float))))
    if fam == "reg_horseshoe":
        lp += float(np.sum(_invgamma_logpdf(shrink.c, spec.slab_a, spec.slab_b)))
    return lp


# ---------------------------------------------------------------------------
# exact prior sampling


def half_cauchy(rng, size, scale=1.0):
    """Half-Cauchy draws by inverse CDF, scale * tan(pi u / 2)."""
    return np.asarray(scale) * np.tan(0.5 * math.pi * rng.random(size))


def inv_gamma(rng, a, b, size):
    return b / rng.gamma(a, 1.0, size)


@dataclass
class PriorDraws:
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    lambda_prog: np.ndarray
    lambda_pred: np.ndarray
    tau: np.ndarray | None = None
    c: np.ndarray | None = None
    lambda_star: np.ndarray | None = None

    def block(self, name: str) -> np.ndarray:
        return getattr(self, name)


def sample_prior(spec: PriorSpec, k: int, rng, n_draws: int, group_index=None) -> PriorDraws:
    """Exact i.i.d. draws of (beta, gamma, delta) and their latents.

    Latents are drawn first and the coefficients conditionally on them, so
    the coefficient draws follow the marginal prior.  Arrays have shape
    (n_draws, p) for coefficients and (n_draws, k) for lambdas.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    gi = np.arange(k) if group_index is None else np.asarray(group_index)
    p = gi.shape[0]
    spec = spec.resolved(k) if spec.family == "spike_slab" else spec
    fam = spec.family
    if fam in ("flat", "null", "oracle_mask"):
        raise ValueError(f"family {fam!r} is improper and cannot be sampled")
    lam_star = tau = c = None
    if fam == "spike_slab":
        phi = spec.phi
        pred = (rng.random((n_draws, k)) < phi).astype(float)
        if spec.dependent:
            pstar = np.where(pred > 0, spec.phi_inc, phi)
            prog = (rng.random((n_draws, k)) < pstar).astype(float)
        else:
            prog = (rng.random((n_draws, k)) < phi).astype(float)
        c = inv_gamma(rng, spec.slab_a, spec.slab_b, (n_draws, 3))
        lam = [prog[:, gi], pred[:, gi], pred[:, gi]]
        scales = [c[:, [b]] * lam[b] for b in range(3)]
    else:
        pred = half_cauchy(rng, (n_draws, k))
        if spec.dependent:
            lam_star = half_cauchy(rng, (n_draws, k))
            prog = dependent_coupling(lam_star, pred)
        else:
            prog = half_cauchy(rng, (n_draws, k))
        tau = half_cauchy(rng, (n_draws, 3), np.asarray(spec.etas, dtype=float))
        lam = [prog[:, gi], pred[:, gi], pred[:, gi]]
        if fam == "reg_horseshoe":
            c = inv_gamma(rng, spec.slab_a, spec.slab_b, (n_draws, 3))
            scales = [reg_scale(tau[:, [b]], lam[b], c[:, [b]]) for b in range(3)]
        else:
            scales = [tau[:, [b]] * lam[b] for b in range(3)]
    coefs = [rng.standard_normal((n_draws, p)) * scales[b] for b in range(3)]
    return PriorDraws(coefs[0], coefs[1], coefs[2], prog, pred, tau, c, lam_star)


def spike_slab_indicator_conditional(j, state, data, spec, which="pred", **kw):
    """P(lambda_j = 1 | everything else) for a spike-and-slab group.

    Thin wrapper around :func:`doseshrink.spikeslab.indicator_conditional`;
    see there for the argument conventions.
    """
    from .spikeslab import indicator_conditional

    return indicator_conditional(j, state, data, spec, which=which, **kw)
