"""Routing indices for basic nodes and the lowest-index routing rule.

Three index families are computed per node as tables over states ``0..N``:

``IO``
    abandonment probability of a job that joins a node holding ``i`` jobs.
``PI``
    marginal bias ``b(i+1) - b(i)`` of the node's queue fed at its optimal
    Bernoulli-split rate; one policy-improvement step from that split.
``RB``
    Whittle index of the node's admission-control relaxation with the full
    arrival rate.

An arriving job goes to the node with the smallest current index, provided
that index does not exceed the external cost ``C``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from cloudq.errors import IndexabilityViolation
from cloudq.queueing import loss_rate, loss_rate_fn

__all__ = [
    "Family",
    "IndexTable",
    "io_index",
    "pi_index",
    "rb_index",
    "route",
    "index_tables",
    "route_table",
]


class Family(enum.Enum):
    IO = "io"
    PI = "pi"
    RB = "rb"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower())


@dataclass(frozen=True)
class IndexTable:
    family: Family
    node_id: int
    values: np.ndarray
    provenance: dict = field(default_factory=dict, compare=False)
    unstable_from: int | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def N(self):
        return len(self.values) - 1

    def __call__(self, i):
        # states past the table end reuse the last value
        return float(self.values[min(int(i), self.N)])


def io_index(node, env, N, node_id=0):
    """``phi(i) = L(i+1) / D(i+1)``, the abandonment probability of a joining job."""
    L, D = loss_rate_fn(node, env).arrays(N + 1)
    phi = L[1:] / D[1:]
    # below m every joining job starts service at once; the ratio is constant
    phi[: node.m] = L[1] / D[1]
    return IndexTable(Family.IO, node_id, phi, {"theta": env.theta})


def _pi_forward(L, D, lam, ell, m):
    # phi(i) = (ell - L(i) + D(i) phi(i-1)) / lam, with a blow-up monitor
    N = len(L) - 1
    phi = np.empty(N + 1)
    phi[0] = ell / lam
    tripped = None
    for i in range(1, N + 1):
        v = (ell - L[i] + D[i] * phi[i - 1]) / lam
        out_of_range = not (-0.1 <= v <= 2.0)
        drops = i > 2 * m and v < phi[i - 1] - 1e-6
        if out_of_range or drops:
            tripped = i
            phi[i:] = phi[i - 1]
            break
        phi[i] = v
    return phi, tripped


def _pi_stable(rates, N, lam, ell):
    # phi(i) = sum_{j<=i} q_j (ell - L(j)) / (lam q_i) = sum_{j>i} q_j (L(j) - ell) / (lam q_i)
    # with q the birth-death weights.  Upward recursion on the head sum while
    # L(j) <= ell and downward recursion on the tail sum beyond: both only add
    # nonnegative terms, so neither amplifies rounding error.
    J = max(2 * N, N + 64)
    while True:
        L, D = rates.arrays(J + 1)
        logq = np.concatenate(([0.0], np.cumsum(math.log(lam) - np.log(D[1:]))))
        if logq[J] <= logq[: N + 1].min() - 45.0 or J >= 10_000_000:
            break
        J *= 2
    split = int(np.searchsorted(L, ell, side="right")) - 1  # last j with L(j) <= ell
    split = min(split, N)
    phi = np.empty(J + 1)
    phi[0] = ell / lam
    for i in range(1, split + 1):
        phi[i] = (ell - L[i] + D[i] * phi[i - 1]) / lam
    phi[J] = L[J + 1] / D[J + 1]
    for i in range(J - 1, split, -1):
        phi[i] = (L[i + 1] - ell + lam * phi[i + 1]) / D[i + 1]
    return phi[: N + 1]


def pi_index(node, env, lambda_node, N, ell_node=None, node_id=0, method="stable"):
    """Policy-improvement index of a node fed at Bernoulli rate ``lambda_node``.

    ``method="forward"`` runs the recursion upward from ``phi(0) = ell/lam``;
    it amplifies rounding error geometrically once ``L(i) > ell``, so a monitor
    freezes the table at the last sane value and records the state in
    ``unstable_from``.  ``method="stable"`` (default) runs the same recursion
    upward only while ``L(i) <= ell`` and solves it downward from deep in the
    tail beyond that, which is accurate at every state.
    """
    if lambda_node < 0:
        raise ValueError("arrival rate must be nonnegative")
    prov = {"lambda_node": float(lambda_node), "method": method}
    if lambda_node == 0.0:
        io = io_index(node, env, N, node_id)
        return IndexTable(Family.PI, node_id, io.values, {**prov, "ell_node": 0.0})
    ell = loss_rate(lambda_node, node, env) if ell_node is None else float(ell_node)
    prov["ell_node"] = ell
    rates = loss_rate_fn(node, env)
    if method == "forward":
        L, D = rates.arrays(N)
        phi, tripped = _pi_forward(L, D, lambda_node, ell, node.m)
        return IndexTable(Family.PI, node_id, phi, prov, unstable_from=tripped)
    if method != "stable":
        raise ValueError(f"unknown PI method {method!r}")
    return IndexTable(Family.PI, node_id, _pi_stable(rates, N, lambda_node, ell), prov)


def rb_index(node, env, lam_total, N, node_id=0):
    """Whittle index of the node's admission-control subproblem.

    Linear recursion in the index together with two auxiliary sequences; the
    subproblem sees the full arrival rate ``lam_total``.
    """
    if not lam_total > 0:
        raise ValueError("total arrival rate must be positive")
    lam = float(lam_total)
    L, D = loss_rate_fn(node, env).arrays(N + 1)
    # run the recursion on psi = 1 - phi: each step is psi * (1 - dD/denom)
    # + (dD - dL)/denom with both terms nonnegative (dD >= dL), so there is no
    # cancellation as phi approaches 1 and monotonicity survives rounding
    psi = np.empty(N + 1)
    psi[0] = (D[1] - L[1]) / D[1]
    z = 1.0  # z(1)
    g = lam * D[1] / (lam + D[1])  # g(0)
    for i in range(1, N + 1):
        dL = L[i + 1] - L[i]
        dS = node.mu if i < node.m else 0.0  # service part of dD, exact
        dD = dS + dL
        slack = g * D[i] / lam
        denom = dD + slack
        if i < node.m:
            psi[i] = psi[0]  # flat below m; skip the zero update and its rounding
        else:
            psi[i] = psi[i - 1] * (slack / denom) + dS / denom
        z = 1.0 - lam * D[i] / ((lam + D[i]) * (lam + D[i + 1]) * z)
        g = lam * denom / (z * (lam + D[i + 1]))
    phi = 1.0 - psi
    phi[: node.m] = L[1] / D[1]
    drops = np.nonzero(np.diff(phi) < -1e-12)[0]
    if drops.size:
        i = int(drops[0]) + 1
        raise IndexabilityViolation(f"Whittle index decreases at state {i}: {phi[i - 1]!r} -> {phi[i]!r}")
    return IndexTable(Family.RB, node_id, phi, {"lambda_total": lam})


def route(state, tables, C):
    """Routing action for an arrival seeing occupancies ``state``.

    Returns ``k`` in ``1..n`` for the basic node with the smallest index
    (lowest ``k`` on ties) if that index is at most ``C``, else 0 for the
    external node.
    """
    best_k, best_phi = 0, math.inf
    for k, (i, table) in enumerate(zip(state, tables), start=1):
        phi = table(i)
        if phi < best_phi:
            best_k, best_phi = k, phi
    return best_k if best_phi <= C else 0


def index_tables(instance, family, split=None, pi_method="stable"):
    """Index tables for every node of ``instance`` (file order), up to its truncation."""
    family = Family.parse(family)
    env = instance.env
    N = instance.truncation
    if family is Family.IO:
        return [io_index(nd, env, N, k) for k, nd in enumerate(instance.nodes, start=1)]
    if family is Family.RB:
        return [rb_index(nd, env, instance.lam, N, k) for k, nd in enumerate(instance.nodes, start=1)]
    if split is None:
        from cloudq.split import optimal_bs

        split = optimal_bs(instance)
    return [
        pi_index(nd, env, float(r), N, node_id=k, method=pi_method)
        for k, (nd, r) in enumerate(zip(instance.nodes, split.basic), start=1)
    ]


def route_table(tables, C, dims):
    """Actions of :func:`route` for every occupancy vector of a product grid.

    ``dims[k]`` is the number of states tracked for node ``k``; the result is
    flattened in C order (last node varies fastest).  Same tie and boundary
    rules as :func:`route`, applied with array operations.
    """
    dims = tuple(int(d) for d in dims)
    grids = np.indices(dims).reshape(len(dims), -1)
    vals = np.stack(
        [t.values[np.minimum(g, t.N)] for t, g in zip(tables, grids)], axis=1
    )
    k = vals.argmin(axis=1)  # first minimum, i.e. lowest node id
    best = vals[np.arange(vals.shape[0]), k]
    return np.where(best <= C, k + 1, 0).astype(np.int64)
