"""NUTS sampling with warmup adaptation, spike-and-slab scans and draw storage."""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit, logit

from . import diagnostics as diag
from .backend import BACKEND, get_backend
from .data import TrialDataset
from .emax import prefit as ml_prefit
from .model import H_MIN, H_SPAN, Layout, make_kernel
from .priors import BLOCKS, PriorSpec
from .spikeslab import IndicatorSampler

# named random streams derived from the run seed
STREAM_CHAIN, STREAM_REPLICATION, STREAM_CALIBRATION = 1, 2, 3


class SamplerError(RuntimeError):
    """Sampling could not proceed (bad initialization, all-divergent warmup)."""


class InitializationError(SamplerError):
    pass


def stream_rng(seed: int, stream: int, *index: int) -> np.random.Generator:
    """Generator for a named stream; independent of everything else drawn."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), *map(int, index)]))


@dataclass(frozen=True)
class MCMCConfig:
    chains: int = 4
    warmup: int = 1000
    draws: int = 1000
    target_accept: float = 0.95
    max_treedepth: int = 10
    seed: int = 0
    init_jitter: float = 0.5
    init_attempts: int = 100

    def __post_init__(self):
        if self.chains < 1 or self.warmup < 1 or self.draws < 1:
            raise ValueError("chains, warmup and draws must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if not 1 <= self.max_treedepth <= 16:
            raise ValueError("max_treedepth must lie in [1, 16]")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# stored draws


def draw_names(data: TrialDataset, spec: PriorSpec) -> list[str]:
    names = ["alpha_e0", "alpha_emax", "alpha_log_ed50", "h", "sigma", "nu", "xi"]
    for b in BLOCKS:
        names += [f"{b}[{c}]" for c in data.column_names]
    groups = data.group_names
    fam = spec.family
    if fam in ("horseshoe", "reg_horseshoe", "spike_slab"):
        names += [f"lambda_prog[{g}]" for g in groups] + [f"lambda_pred[{g}]" for g in groups]
        if spec.dependent and fam != "spike_slab":
            names += [f"lambda_star[{g}]" for g in groups]
        if fam != "spike_slab":
            names += [f"tau_{b}" for b in BLOCKS]
        if fam != "horseshoe":
            names += [f"c_{b}" for b in BLOCKS]
    names += ["e0_ref", "emax_ref", "ed50_ref"]
    return names


def _constrained(theta, coef, masks, data, spec, lay, log_dmax) -> np.ndarray:
    nu = expit(theta[2])
    xi = expit(theta[3])
    a_ed = math.log(nu) + log_dmax
    h = H_MIN + H_SPAN * xi
    out = [theta[0], theta[1], a_ed, h, math.exp(theta[4]), nu, xi]
    out += list(coef.ravel())
    fam = spec.family
    if fam == "spike_slab":
        gfirst = [cols[0] for cols in data.groups()]
        out += list(masks[0, gfirst]) + list(masks[1, gfirst])
        out += list(np.exp(theta[lay.c]))
    elif fam in ("horseshoe", "reg_horseshoe"):
        u1, u2 = np.exp(theta[lay.u1]), np.exp(theta[lay.u2])
        prog = np.maximum(u1, u2) if spec.dependent else u1
        out += list(prog) + list(u2)
        if spec.dependent:
            out += list(u1)
        out += list(np.exp(theta[lay.tau]))
        if fam == "reg_horseshoe":
            out += list(np.exp(theta[lay.c]))
    out += [theta[0], theta[1], math.exp(a_ed)]
    return np.asarray(out, dtype=float)


@dataclass
class PosteriorSamples:
    """Post-warmup draws of all chains, stacked chain by chain."""

    names: list
    draws: np.ndarray
    chain: np.ndarray
    iteration: np.ndarray
    stats: dict
    column_names: tuple = ()
    group_names: tuple = ()
    group_index: tuple = ()
    prior: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    backend: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def n_chains(self) -> int:
        return int(np.unique(self.chain).size)

    @property
    def divergences(self) -> int:
        return int(np.sum(self.stats.get("divergent", 0)))

    def index(self, name: str) -> int:
        return self.names.index(name)

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.index(name)]

    def block(self, block: str) -> np.ndarray:
        """(S, p) draws of ``beta``, ``gamma`` or ``delta``."""
        idx = [self.index(f"{block}[{c}]") for c in self.column_names]
        return self.draws[:, idx]

    def by_chain(self) -> np.ndarray:
        """(chains, draws, params) view; chains must have equal length."""
        ids = np.unique(self.chain)
        return np.stack([self.draws[self.chain == c] for c in ids])

    def to_csv(self, path) -> None:
        df = pd.DataFrame(self.draws, columns=self.names)
        df.insert(0, "iter", self.iteration)
        df.insert(0, "chain", self.chain)
        df.to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, column_names=(), group_names=(), group_index=()) -> "PosteriorSamples":
        df = pd.read_csv(path)
        chain = df.pop("chain").to_numpy(int)
        it = df.pop("iter").to_numpy(int)
        names = list(df.columns)
        if not column_names:
            column_names = tuple(n[5:-1] for n in names if n.startswith("beta["))
        return cls(names, df.to_numpy(float), chain, it, {}, tuple(column_names), tuple(group_names),
                   tuple(group_index))

    def write_diagnostics(self, path) -> None:
        Path(path).write_text(json.dumps(self.diagnostics, indent=2, default=float))


# ---------------------------------------------------------------------------
# initialization


def _prior_medians(spec: PriorSpec, lay: Layout, theta: np.ndarray) -> None:
    """Latents at their prior medians (log scale)."""
    if spec.family in ("horseshoe", "reg_horseshoe"):
        theta[lay.u1] = 0.0  # half-Cauchy(0, 1) median is 1
        theta[lay.u2] = 0.0
        theta[lay.tau] = np.log(np.asarray(spec.etas, dtype=float))
    if spec.family in ("reg_horseshoe", "spike_slab"):
        med = stats.invgamma.median(spec.slab_a, scale=spec.slab_b)
        theta[lay.c] = math.log(med)


def _heuristic_start(data: TrialDataset):
    y, d = data.response, data.dose
    e0 = float(y[d == 0].mean())
    emax = float(y[d == data.d_max].mean()) - e0
    ed50 = float(np.median(d[d > 0]))
    return e0, emax, ed50, 1.0, float(np.std(y)) or 1.0


def initial_curve(data: TrialDataset, fit=None):
    """(E0, Emax, ED50, h, sigma) start from the ML pre-fit, else heuristics."""
    if fit is None:
        try:
            fit = ml_prefit(data.dose, data.response)
        except Exception:
            fit = None
    if fit is None:
        return _heuristic_start(data)
    sigma = max(fit.sigma, 1e-3 * (float(np.std(data.response)) or 1.0), 1e-8)
    # a flat pre-fit leaves ED50 unidentified; keep the start inside the dose range
    ed50 = min(max(fit.ed50, float(data.dose_levels[1])), data.d_max)
    return fit.e0, fit.emax, ed50, fit.h, sigma


def initialize(data: TrialDataset, prior: PriorSpec, rng, curve=None, attempts: int = 100,
               jitter: float = 0.5, kernel=None):
    """Initial unconstrained vector and coefficient masks.

    Curve parameters come from ``curve`` (see :func:`initial_curve`) and
    are jittered by U(-jitter, jitter) on every transformed coordinate;
    coefficients start at 0, latents at prior medians and spike-and-slab
    indicators at 0.  Raises :class:`InitializationError` if no finite
    density is found within ``attempts`` draws.
    """
    spec = prior.resolved(data.k, data.d_max)
    lay = Layout(data.p, data.k)
    if curve is None:
        curve = initial_curve(data)
    e0, emax, ed50, h, sigma = curve
    base = np.zeros(lay.dim)
    nu = min(max(ed50 / spec.d_max, 1e-6), 1 - 1e-6)
    xi = min(max((h - H_MIN) / H_SPAN, 1e-6), 1 - 1e-6)
    base[:5] = [e0, emax, logit(nu), logit(xi), math.log(sigma)]
    _prior_medians(spec, lay, base)
    masks = spec.structural_mask(data.p)
    if spec.family == "spike_slab":
        masks = np.zeros((3, data.p))
    if kernel is None:
        kernel = make_kernel(data, spec, masks)
    else:
        kernel.set_masks(masks)
    for _ in range(max(attempts, 1)):
        theta = base.copy()
        theta[:5] += rng.uniform(-jitter, jitter, 5)
        lp, g = kernel.logp_grad(theta)
        if math.isfinite(lp) and np.all(np.isfinite(g)):
            return theta, masks
    raise InitializationError(f"no finite log density after {attempts} initial draws")


# ---------------------------------------------------------------------------
# adaptation


class DualAveraging:
    def __init__(self, eps0: float, delta: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.delta, self.gamma, self.t0, self.kappa = delta, gamma, t0, kappa
        self.restart(eps0)

    def restart(self, eps0: float):
        self.mu = math.log(10.0 * eps0)
        self.s_bar = 0.0
        self.x_bar = 0.0
        self.count = 0

    def update(self, accept: float) -> float:
        self.count += 1
        accept = min(1.0, accept) if math.isfinite(accept) else 0.0
        eta = 1.0 / (self.count + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept)
        x = self.mu - math.sqrt(self.count) / self.gamma * self.s_bar
        w = self.count ** (-self.kappa)
        self.x_bar = w * x + (1.0 - w) * self.x_bar
        return math.exp(x)

    def final(self) -> float:
        return math.exp(self.x_bar)


def warmup_windows(warmup: int, init_buffer=75, term_buffer=50, base_window=25) -> tuple[int, list[int]]:
    """Start of the first adaptation window and the (exclusive) window ends."""
    if warmup < 20:
        return warmup, []
    if init_buffer + base_window + term_buffer > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base_window = warmup - init_buffer - term_buffer
    ends = []
    start, size = init_buffer, base_window
    last = warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        ends.append(end)
        start, size = end, 2 * size
    return init_buffer, ends


def find_step_size(kernel, theta, lp, grad, inv_metric, rng, eps=0.1) -> float:
    """Double or halve ``eps`` until one leapfrog step crosses acceptance 0.8."""
    pk = get_backend("python")
    scale = np.sqrt(np.where(inv_metric > 0, 1.0 / np.where(inv_metric > 0, inv_metric, 1.0), 0.0))
    p0 = rng.standard_normal(theta.size) * scale
    h0 = -lp + 0.5 * float(p0 @ (inv_metric * p0))

    def delta_h(e):
        _, p, _, lp1 = pk.leapfrog(kernel, theta, p0, grad, e, inv_metric)
        h = -lp1 + 0.5 * float(p @ (inv_metric * p))
        return h0 - h if math.isfinite(h) else -math.inf

    direction = 1 if delta_h(eps) > math.log(0.8) else -1
    for _ in range(60):
        eps = eps * 2.0 if direction == 1 else eps / 2.0
        dh = delta_h(eps)
        if direction == 1 and not dh > math.log(0.8):
            break
        if direction == -1 and dh > math.log(0.8):
            break
    return float(min(max(eps, 1e-8), 10.0))


class _Welford:
    """Running variance per coordinate, counting only flagged coordinates."""

    def __init__(self, dim):
        self.n = np.zeros(dim)
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x, flags):
        self.n += flags
        delta = np.where(flags > 0, x - self.mean, 0.0)
        self.mean += np.where(self.n > 0, delta / np.maximum(self.n, 1), 0.0)
        self.m2 += delta * np.where(flags > 0, x - self.mean, 0.0)

    def variance(self):
        n = self.n
        var = np.where(n > 1, self.m2 / np.maximum(n - 1, 1), 1.0)
        reg = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
        return np.where(n >= 5, reg, 1.0)


# ---------------------------------------------------------------------------
# one chain


def _run_chain(args):
    data, spec, cfg, chain_id, curve, backend = args
    rng = stream_rng(cfg.seed, STREAM_CHAIN, chain_id)
    mod = get_backend(backend)
    lay = Layout(data.p, data.k)
    used = lay.used(spec)
    kernel = make_kernel(data, spec, backend=backend)
    theta, masks = initialize(data, spec, rng, curve, cfg.init_attempts, cfg.init_jitter, kernel)
    sas = spec.family == "spike_slab"
    ind = IndicatorSampler(data, spec) if sas else None
    z_idx = np.arange(lay.z.start, lay.z.stop)
    log_dmax = math.log(spec.d_max)

    def active_mask():
        a = used.copy()
        a[z_idx] = masks.ravel() if sas else used[z_idx]
        return a

    inv_metric = used.copy()
    lp, grad = kernel.logp_grad(theta)
    eps = find_step_size(kernel, theta, lp, grad, inv_metric * active_mask(), rng)
    da = DualAveraging(eps, cfg.target_accept)
    win_start, windows = warmup_windows(cfg.warmup)
    wf = _Welford(lay.dim)
    n_iter = cfg.warmup + cfg.draws
    md = cfg.max_treedepth
    n_keep = cfg.draws
    names = draw_names(data, spec)
    out = np.zeros((n_keep, len(names)))
    st = {k: np.zeros(n_keep) for k in ("accept_stat", "treedepth", "n_leapfrog", "divergent", "energy", "stepsize")}
    warm_div = 0
    for it in range(n_iter):
        if sas:
            theta, masks, _ = ind.sweep(kernel, theta, masks, rng)
            lp, grad = kernel.logp_grad(theta)
        act = active_mask()
        im = inv_metric * act
        scale = np.sqrt(np.where(im > 0, 1.0 / np.where(im > 0, im, 1.0), 0.0))
        mom = rng.standard_normal(lay.dim) * scale
        u_dir = rng.random(md)
        u_sel = rng.random(1 << md)
        theta, lp, grad, acc, depth, nlf, div, energy = mod.nuts_transition(
            kernel, theta, lp, grad, eps, im, mom, u_dir, u_sel, md)
        if it < cfg.warmup:
            warm_div += int(div)
            eps = da.update(acc)
            if windows and win_start <= it < windows[-1]:
                wf.add(theta, act)
            if windows and it + 1 in windows:
                inv_metric = np.where(used > 0, wf.variance(), 0.0)
                wf = _Welford(lay.dim)
                eps = find_step_size(kernel, theta, lp, grad, inv_metric * active_mask(), rng, eps)
                da.restart(eps)
            if it + 1 == cfg.warmup:
                eps = da.final()
        else:
            j = it - cfg.warmup
            coef = kernel.coefficients(theta)
            out[j] = _constrained(theta, coef, masks, data, spec, lay, log_dmax)
            st["accept_stat"][j] = acc
            st["treedepth"][j] = depth
            st["n_leapfrog"][j] = nlf
            st["divergent"][j] = float(div)
            st["energy"][j] = energy
            st["stepsize"][j] = eps
    if warm_div >= cfg.warmup:
        raise SamplerError(f"chain {chain_id}: every warmup transition diverged")
    return out, st


def _threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("DOSESHRINK_THREADS", "1") or 1)
    return max(1, int(threads))


def run_chains(data: TrialDataset, prior: PriorSpec, cfg: MCMCConfig | None = None,
               threads: int | None = None, backend: str | None = None, curve=None) -> PosteriorSamples:
    """Sample the posterior; chains run in parallel processes when ``threads > 1``.

    Results are merged by chain id, so output is identical for any thread count.
    """
    cfg = cfg or MCMCConfig()
    spec = prior.resolved(data.k, data.d_max)
    if curve is None:
        curve = initial_curve(data)
    jobs = [(data, spec, cfg, c, curve, backend) for c in range(cfg.chains)]
    n_workers = min(_threads(threads), cfg.chains)
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as ex:
            results = list(ex.map(_run_chain, jobs))
    else:
        results = [_run_chain(j) for j in jobs]
    names = draw_names(data, spec)
    draws = np.vstack([r[0] for r in results])
    chain = np.repeat(np.arange(cfg.chains), cfg.draws)
    it = np.tile(np.arange(cfg.draws), cfg.chains)
    stats_all = {k: np.concatenate([r[1][k] for r in results]) for k in results[0][1]}
    samples = PosteriorSamples(names, draws, chain, it, stats_all, tuple(data.column_names),
                               tuple(data.group_names), tuple(int(g) for g in data.group_index),
                               spec.to_dict(), cfg.to_dict(), backend or BACKEND)
    samples.diagnostics = diag.diagnostics(samples)
    samples.diagnostics["sampler"] = {
        "mean_accept_stat": float(stats_all["accept_stat"].mean()),
        "max_treedepth_hits": int(np.sum(stats_all["treedepth"] >= cfg.max_treedepth)),
        "mean_stepsize": float(stats_all["stepsize"].mean()),
    }
    return samples
