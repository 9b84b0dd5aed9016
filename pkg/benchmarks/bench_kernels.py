"""Time the compiled kernels against the pure-Python fallback.

Usage::

    python benchmarks/bench_kernels.py [--truncation 30] [--jobs 20000] [--repeat 3]

Both backends get identical inputs; the script checks that their outputs agree
before reporting timings.
"""

import argparse
import time

import numpy as np

from cloudq import kernels
from cloudq.instance import base_instance
from cloudq.mdp import build_chain
from cloudq.policies import make_policy
from cloudq.sim import SimConfig, _draws


def _best_of(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_rvi(mod, chain, repeat, max_iter):
    probs = np.empty((0, chain.n + 1))

    def run():
        h = np.zeros(chain.n_states)
        return mod.rvi(h, chain.Lsum, chain.Dk, chain.up, chain.down, probs, chain.blocked,
                       chain.lam, chain.C, chain.Lu, 0.0, max_iter, 0)

    return _best_of(run, repeat)


def bench_sim(mod, inst, jobs, repeat):
    pol = make_policy(inst, "pi")
    dims = np.full(inst.n, inst.truncation + 1, dtype=np.int64)
    mode, cum, table = pol.sim_routing(tuple(dims))
    inter, patience, work, u = _draws(inst, SimConfig(jobs=jobs, seed=1), 0)
    m = np.array([nd.m for nd in inst.nodes], dtype=np.int64)
    mu = np.array([nd.mu for nd in inst.nodes])
    args = (inter, patience, work, u, m, mu, inst.theta, False, mode,
            np.ascontiguousarray(cum, dtype=float), np.ascontiguousarray(table, dtype=np.int64),
            dims, 0.2 * inter.sum())
    return _best_of(lambda: mod.simulate(*args), repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--truncation", type=int, default=30)
    ap.add_argument("--sweeps", type=int, default=50, help="RVI sweeps per timing")
    ap.add_argument("--jobs", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    available = kernels.backends()
    inst = base_instance(1, truncation=args.truncation)
    chain = build_chain(inst)
    print(f"chain: {chain.n_states} states; simulation: {args.jobs} jobs")
    print(f"{'kernel':<10}{'backend':<10}{'seconds':>12}{'speedup':>10}")
    results = {}
    for kind in ("rvi", "simulate"):
        for name, mod in available.items():
            if kind == "rvi":
                results[kind, name] = bench_rvi(mod, chain, args.repeat, args.sweeps)
            else:
                results[kind, name] = bench_sim(mod, inst, args.jobs, args.repeat)
        base = results[kind, "python"][0]
        for name in available:
            secs = results[kind, name][0]
            print(f"{kind:<10}{name:<10}{secs:>12.4f}{base / secs:>9.1f}x")
    if "cython" in available:
        a, b = results["rvi", "cython"][1], results["rvi", "python"][1]
        assert abs(a[1] - b[1]) <= 1e-9 * max(1.0, abs(a[1])), "RVI backends disagree"
        c, p = results["simulate", "cython"][1], results["simulate", "python"][1]
        assert all(np.allclose(c[k], p[k]) for k in c), "simulation backends disagree"
        print("outputs agree")


if __name__ == "__main__":
    main()
