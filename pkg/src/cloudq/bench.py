"""Optimality-gap study over a parameter grid, and one-parameter sweeps.

The test bed has two basic nodes with ``m = (10, 40)`` and ``mu_2 = 1``;
``mu_1``, the nominal load ``rho``, ``theta`` and ``C`` range over grids and
``lam = rho (m_1 mu_1 + m_2 mu_2)``.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from cloudq.indices import Family, index_tables
from cloudq.instance import Instance
from cloudq.mdp import build_chain, evaluate_policy, optimality_gap, solve_optimal
from cloudq.policies import make_policy
from cloudq.queueing import NodeParams, Regime
from cloudq.sim import thread_count
from cloudq.split import big_lambda_star, optimal_bs

log = logging.getLogger(__name__)

__all__ = [
    "TestBedSpec",
    "GapTable",
    "generate_testbed",
    "run_benchmark",
    "sweep",
    "SweepResult",
    "FULL_GRID",
    "SMALL_GRID",
]

GAP_FLOOR = -1e-6
BENCH_POLICIES = ("bs", "io", "pi", "rb")


@dataclass(frozen=True)
class TestBedSpec:
    mu1: tuple
    rho: tuple
    theta: tuple
    C: tuple
    regimes: tuple = (Regime.DBS,)
    m: tuple = (10, 40)
    mu2: float = 1.0
    truncation: int = 80

    __test__ = False  # not a pytest class

    def __post_init__(self):
        for name in ("mu1", "rho", "theta", "C"):
            grid = tuple(float(v) for v in getattr(self, name))
            if not grid:
                raise ValueError(f"grid {name} is empty")
            if min(grid) <= 0:
                raise ValueError(f"grid {name} must be positive")
            object.__setattr__(self, name, grid)
        object.__setattr__(self, "regimes", tuple(Regime.parse(r) for r in self.regimes))

    def with_regimes(self, *regimes):
        return TestBedSpec(self.mu1, self.rho, self.theta, self.C, regimes, self.m, self.mu2, self.truncation)

    @property
    def size(self):
        return len(self.mu1) * len(self.rho) * len(self.theta) * len(self.C) * len(self.regimes)


FULL_GRID = TestBedSpec(
    mu1=tuple(np.arange(1.0, 5.01, 0.5)),
    rho=(0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5),
    theta=tuple(np.round(np.arange(0.2, 1.11, 0.1), 10)),
    C=tuple(np.round(np.arange(0.1, 0.81, 0.1), 10)),
)

SMALL_GRID = TestBedSpec(
    mu1=(1.0, 3.0, 5.0),
    rho=(0.9, 1.2, 1.5),
    theta=(0.2, 0.6, 1.1),
    C=(0.2, 0.5, 0.8),
)


def generate_testbed(spec):
    """Instances of the Cartesian grid, regime outermost and ``C`` fastest."""
    out = []
    m1, m2 = spec.m
    for regime, mu1, rho, theta, C in itertools.product(spec.regimes, spec.mu1, spec.rho, spec.theta, spec.C):
        lam = rho * (m1 * mu1 + m2 * spec.mu2)
        name = f"{regime.value}-mu{mu1:g}-rho{rho:g}-th{theta:g}-C{C:g}"
        out.append(Instance(regime, lam, theta, C, (NodeParams(m1, mu1), NodeParams(m2, spec.mu2)),
                            truncation=spec.truncation, name=name))
    return out


@dataclass
class GapTable:
    records: list
    policies: tuple = BENCH_POLICIES
    meta: dict = field(default_factory=dict)

    def ok_records(self):
        return [r for r in self.records if not r.get("error")]

    def gaps(self, policy):
        return np.array([r[f"gap_{policy}"] for r in self.ok_records()])

    def improvements(self, other):
        return np.array([r[f"impr_pi_{other}"] for r in self.ok_records()])

    def summary(self):
        """``{policy: (min, avg, max)}`` of the gap percentages."""
        out = {}
        for p in self.policies:
            g = self.gaps(p)
            out[p] = (float(g.min()), float(g.mean()), float(g.max())) if g.size else (math.nan,) * 3
        return out

    def improvement_summary(self):
        out = {}
        for p in self.policies:
            if p == "pi" or "pi" not in self.policies:
                continue
            v = self.improvements(p)
            out[p] = (float(v.min()), float(v.mean()), float(v.max())) if v.size else (math.nan,) * 3
        return out

    def summary_rows(self):
        rows = []
        for p, (lo, avg, hi) in self.summary().items():
            rows.append({"table": "gap", "policy": p, "min": lo, "avg": avg, "max": hi,
                         "count": int(self.gaps(p).size)})
        for p, (lo, avg, hi) in self.improvement_summary().items():
            rows.append({"table": "pi_improvement", "policy": p, "min": lo, "avg": avg, "max": hi,
                         "count": int(self.improvements(p).size)})
        return rows


def _bench_one(idx, inst, policies, method, tol):
    rec = {"index": idx, "instance": inst.name, "regime": inst.regime.value, "lambda": inst.lam,
           "theta": inst.theta, "C": inst.C, "mu1": inst.nodes[0].mu, "mu2": inst.nodes[1].mu if inst.n > 1 else math.nan,
           "rho": inst.load, "truncation": inst.truncation, "error": ""}
    t0 = time.perf_counter()
    try:
        chain = build_chain(inst)
        opt = solve_optimal(chain, tol=tol, method=method)
        z_star = 1.0 - opt.gain / inst.lam
        rec.update(g_star=opt.gain, z_star=z_star, iterations=opt.iterations)
        split = optimal_bs(inst)
        for p in policies:
            rep = evaluate_policy(chain, make_policy(inst, p, split=split))
            rec[f"z_{p}"] = rep.profit
            rec[f"gap_{p}"] = optimality_gap(z_star, rep.profit)
        if "pi" in policies:
            for p in policies:
                if p != "pi":
                    rec[f"impr_pi_{p}"] = 100.0 * (rec["z_pi"] - rec[f"z_{p}"]) / rec[f"z_{p}"]
    except Exception as exc:  # recorded, the run goes on
        log.warning("instance %s failed: %s", inst.name, exc)
        rec["error"] = f"{type(exc).__name__}: {exc}"
    rec["seconds"] = time.perf_counter() - t0
    return rec


def run_benchmark(instances, policies=BENCH_POLICIES, method="rvi", tol=1e-10, threads=None, progress=None):
    """Optimal profit per job and per-policy gaps for every instance.

    Instances run concurrently on up to ``threads`` workers (default from
    ``CLOUDQ_THREADS``); records come back in input order whatever the
    completion order.  Failures are recorded in the ``error`` column.
    """
    policies = tuple(p.lower() for p in policies)
    threads = thread_count() if threads is None else max(1, int(threads))

    def job(item):
        rec = _bench_one(item[0], item[1], policies, method, tol)
        if progress is not None:
            progress(rec)
        return rec

    items = list(enumerate(instances))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            records = list(pool.map(job, items))
    else:
        records = [job(it) for it in items]
    return GapTable(records, policies, meta={"method": method, "tol": tol, "threads": threads})


# ---------------------------------------------------------------- sweeps

SWEEP_PARAMETERS = ("lambda", "theta", "C", "mu_k", "m_k", "state")


@dataclass
class SweepResult:
    kind: str
    parameter: str
    rows: list
    checks: dict = field(default_factory=dict)


def _vary(instance, parameter, value, node):
    if parameter == "lambda":
        return instance.replace(lam=float(value))
    if parameter == "theta":
        return instance.replace(theta=float(value))
    if parameter == "C":
        return instance.replace(C=float(value))
    if parameter == "mu_k":
        return instance.with_node(node, mu=float(value))
    if parameter == "m_k":
        return instance.with_node(node, m=int(value))
    raise ValueError(f"cannot vary {parameter!r}")


def _nondecreasing(values, tol=1e-9):
    v = np.asarray(values, dtype=float)
    return bool(np.all(np.diff(v) >= -tol * np.maximum(1.0, np.abs(v[:-1]))))


def sweep(instance, parameter, grid, kind="split", node=1, state=14):
    """Rows of outputs against one parameter.

    ``kind="split"`` records the optimal split; ``kind="index"`` the IO, PI
    and RB index of every node at ``state`` (or across states when
    ``parameter="state"``).  ``node`` (1-based) selects the node for
    ``mu_k``/``m_k``.  Shape checks on the results are collected in
    ``checks``.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"unknown sweep parameter {parameter!r}; expected one of {SWEEP_PARAMETERS}")
    k = int(node) - 1
    if parameter in ("mu_k", "m_k") and not 0 <= k < instance.n:
        raise ValueError(f"node must lie in 1..{instance.n}")
    grid = list(grid)
    rows = []
    if kind == "split":
        if parameter == "state":
            raise ValueError("split sweeps cannot vary the state")
        for v in grid:
            inst = _vary(instance, parameter, v, k)
            s = optimal_bs(inst)
            row = {parameter: v}
            for j, r in enumerate(s.rates):
                row[f"lambda_{j}"] = float(r)
            row.update(alpha_star=s.alpha_star, c_star=s.c_star, method=s.method)
            rows.append(row)
        return SweepResult(kind, parameter, rows, _split_checks(instance, parameter, rows))
    if kind != "index":
        raise ValueError(f"unknown sweep kind {kind!r}")
    if parameter == "state":
        N = max(int(max(grid)), instance.truncation)
        inst = instance.replace(truncation=N)
        tables = {f: index_tables(inst, f) for f in Family}
        for v in grid:
            for j in range(instance.n):
                rows.append({"state": int(v), "node": j + 1,
                             **{f.value: tables[f][j](int(v)) for f in Family}})
    else:
        for v in grid:
            inst = _vary(instance, parameter, v, k)
            inst = inst.replace(truncation=max(inst.truncation, state))
            tables = {f: index_tables(inst, f) for f in Family}
            for j in range(inst.n):
                rows.append({parameter: v, "node": j + 1, "state": state,
                             **{f.value: tables[f][j](state) for f in Family}})
    return SweepResult(kind, parameter, rows, _index_checks(instance, parameter, rows, k))


def _split_checks(instance, parameter, rows):
    ext = [r["lambda_0"] for r in rows]
    checks = {}
    if parameter in ("lambda", "theta"):
        checks["lambda_0 nondecreasing"] = _nondecreasing(ext)
    elif parameter == "C":
        checks["lambda_0 nonincreasing"] = _nondecreasing(ext[::-1])
    if parameter == "lambda":
        # basic rates freeze once the basic nodes run at marginal cost C
        cap = big_lambda_star(instance, instance.C) if instance.C < 1 else math.inf
        beyond = [r for r in rows if r["lambda"] > cap]
        if len(beyond) >= 2:
            basic = np.array([[r[f"lambda_{j}"] for j in range(1, instance.n + 1)] for r in beyond])
            checks["basic rates constant beyond Lambda*(C)"] = bool(np.ptp(basic, axis=0).max() <= 1e-6)
    return checks


def _index_checks(instance, parameter, rows, k):
    checks = {}
    by_node = {}
    for r in rows:
        by_node.setdefault(r["node"], []).append(r)
    if parameter == "state":
        for j, rs in by_node.items():
            checks[f"io nondecreasing in state (node {j})"] = _nondecreasing([r["io"] for r in rs])
            checks[f"rb nondecreasing in state (node {j})"] = _nondecreasing([r["rb"] for r in rs])
    elif parameter in ("lambda", "C"):
        for j, rs in by_node.items():
            io = [r["io"] for r in rs]
            checks[f"io constant (node {j})"] = bool(np.ptp(io) <= 1e-12)
            if parameter == "lambda":
                checks[f"rb nondecreasing (node {j})"] = _nondecreasing([r["rb"] for r in rs])
    elif parameter == "theta":
        for j, rs in by_node.items():
            checks[f"rb nondecreasing (node {j})"] = _nondecreasing([r["rb"] for r in rs])
    elif parameter in ("mu_k", "m_k"):
        rs = by_node[k + 1]
        for f in ("io", "rb"):
            checks[f"{f} nonincreasing (node {k + 1})"] = _nondecreasing([r[f] for r in rs][::-1])
    return checks
