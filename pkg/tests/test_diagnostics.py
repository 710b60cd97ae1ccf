import numpy as np
import pytest

from doseshrink.diagnostics import ess_bulk, rank_normalize, rhat, rhat_rank, split_chains, summarize


def ar1(rho, n, chains, seed):
    rng = np.random.default_rng(seed)
    x = np.empty((chains, n))
    x[:, 0] = rng.standard_normal(chains) / np.sqrt(1 - rho ** 2)
    e = rng.standard_normal((chains, n))
    for t in range(1, n):
        x[:, t] = rho * x[:, t - 1] + e[:, t]
    return x


def test_rhat_iid_near_one():
    x = np.random.default_rng(0).standard_normal((4, 1000))
    assert 0.99 <= rhat(x) <= 1.01


def test_rhat_offset_chains():
    x = np.random.default_rng(1).standard_normal((2, 1000))
    x[1] += 10
    assert rhat(x) > 2
    assert rhat_rank(x) > 1.5


def test_rank_rhat_iid_near_one():
    x = np.random.default_rng(0).standard_normal((4, 1000))
    assert 0.99 <= rhat_rank(x) <= 1.01


def test_rhat_heavy_tails_rank_version_stable():
    x = np.random.default_rng(6).standard_cauchy((4, 1000))
    assert rhat_rank(x) < 1.01


def test_rhat_single_chain_unavailable():
    assert np.isnan(rhat(np.random.default_rng(2).standard_normal(500)))
    with pytest.warns(UserWarning):
        out = summarize(np.random.default_rng(2).standard_normal((1, 200, 2)), ["a", "b"])
    assert out["rhat"]["a"] is None and not out["rhat_available"]


def test_ess_ar1():
    rho = 0.9
    x = ar1(rho, 5000, 4, 3)
    frac = ess_bulk(x) / x.size
    target = (1 - rho) / (1 + rho)
    assert 0.5 * target <= frac <= 1.5 * target


def test_ess_iid_close_to_sample_size():
    x = np.random.default_rng(4).standard_normal((4, 1000))
    assert 0.8 * x.size <= ess_bulk(x) <= 1.2 * x.size


def test_split_and_rank_helpers():
    x = np.arange(10.0).reshape(2, 5)
    s = split_chains(x)
    assert s.shape == (4, 2)
    assert np.array_equal(s[0], [0, 1]) and np.array_equal(s[2], [3, 4])
    z = rank_normalize(x)
    assert np.all(np.diff(z.ravel()) > 0)
    assert z.mean() == pytest.approx(0, abs=1e-12)


def test_summary_counts():
    arr = np.random.default_rng(5).standard_normal((3, 100, 2))
    out = summarize(arr, ["a", "b"], divergences=4)
    assert out["divergences"] == 4 and out["chains"] == 3 and out["draws_per_chain"] == 100
    assert set(out["rhat"]) == {"a", "b"}


def test_constant_draws_give_nan():
    assert np.isnan(rhat(np.ones((2, 100))))
    assert np.isnan(ess_bulk(np.ones((2, 100))))
