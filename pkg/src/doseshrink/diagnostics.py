"""Split R-hat and rank-normalized bulk effective sample size."""
from __future__ import annotations

import warnings

import numpy as np
from scipy import special, stats


def _as_chains(draws) -> np.ndarray:
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("draws must have shape (chains, iterations)")
    return x


def split_chains(x: np.ndarray) -> np.ndarray:
    """Halve every chain, dropping the middle draw of odd-length chains."""
    n = x.shape[1]
    half = n // 2
    return np.vstack([x[:, :half], x[:, n - half:]])


def rank_normalize(x: np.ndarray) -> np.ndarray:
    """Normal scores of pooled ranks (average ties), Blom offset 3/8."""
    r = stats.rankdata(x, method="average").reshape(x.shape)
    return special.ndtri((r - 0.375) / (x.size + 0.25))


def _rhat_basic(x: np.ndarray) -> float:
    m, n = x.shape
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if not w > 0:
        return float("nan")
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def rhat(draws) -> float:
    """Split R-hat on the raw draws.  NaN for a single chain or constant draws."""
    x = _as_chains(draws)
    if x.shape[0] < 2 or np.ptp(x) == 0:
        return float("nan")
    return _rhat_basic(split_chains(x))


def rhat_rank(draws) -> float:
    """Rank-normalized split R-hat; robust to heavy tails but bounded for separated chains."""
    x = _as_chains(draws)
    if x.shape[0] < 2 or np.ptp(x) == 0:
        return float("nan")
    return _rhat_basic(split_chains(rank_normalize(x)))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Autocovariance per row via FFT (biased estimator, lag 0..n-1)."""
    m, n = x.shape
    nfft = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, n=nfft, axis=1)
    ac = np.fft.irfft(f * np.conj(f), n=nfft, axis=1)[:, :n]
    return ac / n


def ess_raw(x: np.ndarray) -> float:
    """ESS of a (chains, draws) array with Geyer's initial monotone sequence."""
    m, n = x.shape
    if n < 4 or np.ptp(x) == 0:
        return float("nan")
    acov = _autocovariance(x)
    chain_mean = x.mean(axis=1)
    chain_var = acov[:, 0] * n / (n - 1)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    rho = np.zeros(n)
    rho[0] = 1.0
    even = 1.0
    odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = odd
    t = 1
    while t < n - 3 and even + odd > 0:
        even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if even + odd >= 0:
            rho[t + 1] = even
            rho[t + 2] = odd
        t += 2
    max_t = t - 2
    if odd > 0:
        rho[max_t + 1] = odd
    # initial monotone sequence on the paired sums
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    tau = -1.0 + 2.0 * rho[:max_t + 1].sum() + rho[max_t + 1:max_t + 2].sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def ess_bulk(draws) -> float:
    """Bulk ESS: rank-normalized split chains."""
    x = _as_chains(draws)
    if x.shape[1] < 4:
        return float("nan")
    return ess_raw(split_chains(rank_normalize(x)))


def summarize(samples_by_chain: np.ndarray, names, divergences: int = 0) -> dict:
    """Per-parameter R-hat and bulk ESS.

    ``samples_by_chain`` has shape (chains, draws, params).
    """
    arr = np.asarray(samples_by_chain, dtype=float)
    m = arr.shape[0]
    if m < 2:
        warnings.warn("R-hat needs at least 2 chains; reported as null", stacklevel=2)
    out = {"rhat": {}, "rhat_rank": {}, "ess_bulk": {}, "divergences": int(divergences),
           "chains": int(m), "draws_per_chain": int(arr.shape[1]),
           "rhat_available": bool(m >= 2)}
    for i, name in enumerate(names):
        col = arr[:, :, i]
        r = rhat(col) if m >= 2 else float("nan")
        rr = rhat_rank(col) if m >= 2 else float("nan")
        e = ess_bulk(col)
        out["rhat"][name] = None if not np.isfinite(r) else r
        out["rhat_rank"][name] = None if not np.isfinite(rr) else rr
        out["ess_bulk"][name] = None if not np.isfinite(e) else e
    return out


def diagnostics(samples) -> dict:
    """R-hat, bulk ESS and divergence count of a :class:`PosteriorSamples`."""
    return summarize(samples.by_chain(), samples.names, samples.divergences)
