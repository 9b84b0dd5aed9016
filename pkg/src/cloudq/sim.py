"""Discrete-event simulation of the routing system under a stationary policy.

Queues are unbounded and FCFS.  Each job carries an exponential patience
drawn at arrival; under DBS it leaves if its service has not started when
patience runs out, under DES if its service has not finished (freeing the
server).  Every abandonment at a basic node costs one refunded fee and every
external routing costs ``C``.

Random numbers come from independent Philox streams keyed by
``(seed, replication, role)``, so a replication's output depends only on
those three numbers, never on which worker ran it or in what order.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from cloudq import kernels
from cloudq.errors import ValidationFailure
from cloudq.queueing import Regime

__all__ = [
    "SimConfig",
    "SimReport",
    "ReplicationResult",
    "Validation",
    "simulate",
    "validate_against_exact",
    "stream",
    "thread_count",
]

_ROLES = {"interarrival": 0, "patience": 1, "work": 2, "route": 3}


@dataclass(frozen=True)
class SimConfig:
    """Run length is ``jobs`` arrivals or, if ``jobs`` is None, ``horizon`` time units."""

    jobs: int | None = 100_000
    horizon: float | None = None
    replications: int = 20
    warmup: float = 0.2
    seed: int = 0
    confidence: float = 0.95

    def __post_init__(self):
        if self.jobs is None and self.horizon is None:
            raise ValueError("give a job count or a time horizon")
        if self.jobs is not None and self.jobs < 0:
            raise ValueError("job count must be nonnegative")
        if self.jobs is None and not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if not 0.0 <= self.warmup <= 0.5:
            raise ValueError("warmup fraction must lie in [0, 0.5]")


@dataclass(frozen=True)
class ReplicationResult:
    cost_rate: float
    cost_rate_area: float
    abandon: np.ndarray
    external_fraction: float
    arrivals: int
    completions: int
    external: int
    in_system_end: int
    window: float


@dataclass(frozen=True)
class SimReport:
    policy: str
    cost_rate: float
    cost_halfwidth: float
    profit: float
    profit_halfwidth: float
    abandon_rate: np.ndarray
    external_fraction: float
    external_halfwidth: float
    replications: tuple = field(repr=False)
    meta: dict = field(default_factory=dict)

    def as_record(self, **extra):
        rec = dict(extra)
        rec.update(
            policy=self.policy, cost_rate=self.cost_rate, cost_halfwidth=self.cost_halfwidth,
            profit=self.profit, profit_halfwidth=self.profit_halfwidth,
            external_fraction=self.external_fraction,
            external_halfwidth=self.external_halfwidth,
        )
        for k, r in enumerate(self.abandon_rate, start=1):
            rec[f"abandon_rate_{k}"] = float(r)
        rec.update(self.meta)
        return rec


def stream(seed, rep, role):
    """Generator for one ``(seed, replication, role)`` triple."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(rep), _ROLES[role]))
    return np.random.Generator(np.random.Philox(ss))


def thread_count():
    """Worker count from ``CLOUDQ_THREADS`` (default 1)."""
    raw = os.environ.get("CLOUDQ_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"CLOUDQ_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _draws(instance, config, rep):
    lam = instance.lam
    g = stream(config.seed, rep, "interarrival")
    if config.jobs is not None:
        inter = g.exponential(1.0 / lam, config.jobs)
    else:
        chunks, total = [], 0.0
        size = max(16, int(1.2 * lam * config.horizon) + 16)
        while total <= config.horizon:
            c = g.exponential(1.0 / lam, size)
            chunks.append(c)
            total += c.sum()
        inter = np.concatenate(chunks)
        inter = inter[np.cumsum(inter) <= config.horizon]
    J = len(inter)
    patience = stream(config.seed, rep, "patience").exponential(1.0, J)
    work = stream(config.seed, rep, "work").exponential(1.0, J)
    route_u = stream(config.seed, rep, "route").random(J)
    return inter, patience, work, route_u


def _replicate(instance, policy, config, rep, routing, kernel):
    inter, patience, work, route_u = _draws(instance, config, rep)
    t_end = float(inter.sum()) if len(inter) else 0.0
    if config.jobs is None:
        t_end = float(config.horizon)
    t_warm = config.warmup * t_end
    mode, cum, table, dims = routing
    m = np.array([nd.m for nd in instance.nodes], dtype=np.int64)
    mu = np.array([nd.mu for nd in instance.nodes], dtype=float)
    out = kernel(
        inter, patience, work, route_u, m, mu, float(instance.theta),
        instance.regime is Regime.DES, int(mode), cum, table, dims, float(t_warm),
    )
    # the event loop stops at the last arrival, so the observed window ends there too
    window = out["window"]
    abandon = np.asarray(out["abandon_window"], dtype=float)
    if window > 0:
        cost = (abandon.sum() + instance.C * out["external_window"]) / window
        occupancy = out["area"] if instance.regime is Regime.DES else out["excess_area"]
        cost_area = (instance.theta * np.sum(occupancy) + instance.C * out["external_window"]) / window
        rates = abandon / window
    else:
        cost = cost_area = 0.0
        rates = np.zeros(instance.n)
    frac = out["external_window"] / out["arrivals_window"] if out["arrivals_window"] else 0.0
    return ReplicationResult(
        cost_rate=float(cost), cost_rate_area=float(cost_area), abandon=rates,
        external_fraction=float(frac), arrivals=int(out["arrivals"]),
        completions=int(out["completions"]), external=int(out["external"]),
        in_system_end=int(out["in_system_end"]), window=float(window),
    )


def _halfwidth(x, confidence):
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return math.inf
    q = stats.t.ppf(0.5 + confidence / 2.0, len(x) - 1)
    return float(q * x.std(ddof=1) / math.sqrt(len(x)))


def simulate(instance, policy, config=SimConfig(), kernel=None):
    """Replicated simulation; point estimates are replication means.

    The 95% (``config.confidence``) half-widths come from the t-distribution
    over replications.  Occupancy vectors beyond the instance truncation are
    clipped when looking up state-dependent policies.
    """
    kernel = kernels.simulate if kernel is None else kernel
    dims = np.full(instance.n, instance.truncation + 1, dtype=np.int64)
    if hasattr(policy, "dims"):
        dims = np.asarray(policy.dims, dtype=np.int64)
    mode, cum, table = policy.sim_routing(tuple(dims))
    routing = (mode, np.ascontiguousarray(cum, dtype=float),
               np.ascontiguousarray(table, dtype=np.int64), dims)

    def run(rep):
        return _replicate(instance, policy, config, rep, routing, kernel)

    reps = range(config.replications)
    workers = min(thread_count(), config.replications)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, reps))
    else:
        results = [run(r) for r in reps]

    costs = np.array([r.cost_rate for r in results])
    fracs = np.array([r.external_fraction for r in results])
    cost = float(costs.mean())
    hw = _halfwidth(costs, config.confidence)
    return SimReport(
        policy=getattr(policy, "name", type(policy).__name__),
        cost_rate=cost,
        cost_halfwidth=hw,
        profit=1.0 - cost / instance.lam,
        profit_halfwidth=hw / instance.lam,
        abandon_rate=np.mean([r.abandon for r in results], axis=0),
        external_fraction=float(fracs.mean()),
        external_halfwidth=_halfwidth(fracs, config.confidence),
        replications=tuple(results),
        meta={"seed": config.seed, "replications": config.replications,
              "jobs": config.jobs, "horizon": config.horizon, "warmup": config.warmup,
              "backend": getattr(kernel, "__module__", kernels.BACKEND)},
    )


@dataclass(frozen=True)
class Validation:
    policy: str
    simulated: float
    halfwidth: float
    exact: float
    exact_method: str

    @property
    def deviation(self):
        return abs(self.simulated - self.exact)

    @property
    def passed(self):
        return self.deviation <= 3.0 * self.halfwidth


def validate_against_exact(instance, policy, config=SimConfig(), exact=None, truncation=None):
    """Compare simulated and exact cost rates; raise unless within 3 half-widths.

    Bernoulli splits are checked against the closed-form split cost; other
    policies against the truncated-chain evaluation (``exact`` may be passed
    in to reuse one).
    """
    from cloudq.mdp import build_chain, evaluate_policy
    from cloudq.policies import BernoulliSplit
    from cloudq.split import bs_objective

    if exact is None:
        if isinstance(policy, BernoulliSplit):
            exact, how = bs_objective(instance, policy.split), "analytic"
        else:
            chain = build_chain(instance, truncation=truncation)
            rep = evaluate_policy(chain, policy)
            exact, how = rep.gain, rep.method
    else:
        how = "given"
    sim = simulate(instance, policy, config)
    out = Validation(sim.policy, sim.cost_rate, sim.cost_halfwidth, float(exact), how)
    if not out.passed:
        raise ValidationFailure(
            f"{out.policy}: simulated cost rate {out.simulated:.6g} +- {out.halfwidth:.3g} "
            f"vs exact {out.exact:.6g}",
            simulated=out.simulated, exact=out.exact,
        )
    return out
