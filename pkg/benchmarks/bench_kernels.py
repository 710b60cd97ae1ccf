"""Compiled vs pure-Python posterior kernels.

Times the log-posterior gradient and one NUTS transition for each prior
family on a simulated trial and prints one line per (family, backend).

    python benchmarks/bench_kernels.py --n 500 --k 10 --repeat 200
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from doseshrink.backend import available, get_backend
from doseshrink.mcmc import initialize, stream_rng
from doseshrink.model import make_kernel
from doseshrink.priors import PriorSpec
from doseshrink.simulation import ScenarioSpec, generate_trial

FAMILIES = ("rhs_dep", "hs", "sas_dep", "noshrink")
ETAS = {"eta_beta": 0.03, "eta_gamma": 0.006, "eta_delta": 0.026}


def _spec(label):
    kw = ETAS if label.split("_")[0] in ("hs", "rhs") else {}
    return PriorSpec.from_label(label, **kw)


def _time(fn, repeat):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def bench(n=500, k=10, repeat=200, depth=6, seed=0):
    data = generate_trial(ScenarioSpec("prog_and_pred", n=n, k=k), stream_rng(seed, 2, 0)).data
    rows = []
    for label in FAMILIES:
        spec = _spec(label)
        theta, masks = initialize(data, spec.resolved(data.k, data.d_max), np.random.default_rng(seed))
        for name in available():
            mod = get_backend(name)
            kern = make_kernel(data, spec, masks, backend=name)
            lp, g = kern.logp_grad(theta)
            im = np.ones(kern.dim)
            rng = np.random.default_rng(1)
            mom = rng.standard_normal(kern.dim)
            u_dir = rng.random(depth)
            u_sel = rng.random(2 ** depth)
            t_grad = _time(lambda: kern.logp_grad(theta), repeat)
            t_nuts = _time(lambda: mod.nuts_transition(kern, theta, lp, g, 0.01, im, mom, u_dir, u_sel, depth),
                           max(1, repeat // 20))
            rows.append((label, name, t_grad, t_nuts))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--depth", type=int, default=6)
    a = ap.parse_args(argv)
    rows = bench(a.n, a.k, a.repeat, a.depth)
    print(f"{'family':10s} {'backend':8s} {'grad_us':>10s} {'nuts_ms':>10s} {'speedup':>8s}")
    base = {(r[0]): r for r in rows if r[1] == "python"}
    for fam, name, tg, tn in rows:
        sp = base[fam][2] / tg if fam in base else float("nan")
        print(f"{fam:10s} {name:8s} {tg * 1e6:10.1f} {tn * 1e3:10.2f} {sp:8.1f}")


if __name__ == "__main__":
    main()
