"""Exact average-cost analysis on the truncated product chain.

States are occupancy vectors ``(i_1, ..., i_n)`` with ``0 <= i_k <= N``,
stored as mixed-radix linear indices in C order (node ``n`` varies fastest).
The continuous-time chain is uniformized at
``Lu = lam + sum_k D_k(N)``; the stage cost rate in state ``s`` under
destination ``a`` is ``sum_k L_k(i_k) + lam * C * [a == 0]``.

Routing to a full node is not allowed by default: a policy that would do so
sends the job to the external node instead.  With ``forbid_full=False`` the
arrival is lost without charge and the chain self-loops; optimal policies
then learn to park a node at the bound and discard jobs for free, which
distorts gaps whenever ``C`` is large.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from cloudq import kernels
from cloudq.errors import DegenerateBaseline, NoConvergence, StateSpaceTooLarge
from cloudq.queueing import loss_rate_fn

log = logging.getLogger(__name__)

__all__ = [
    "UniformizedChain",
    "SolveResult",
    "EvalReport",
    "build_chain",
    "solve_optimal",
    "evaluate_policy",
    "stationary_distribution",
    "optimality_gap",
    "DIRECT_LIMIT",
]

STATE_CAP = 5_000_000
DIRECT_LIMIT = 100_000


@dataclass(frozen=True, eq=False)
class UniformizedChain:
    lam: float
    C: float
    dims: tuple
    occ: np.ndarray  # (S, n) occupancies
    up: np.ndarray  # (S, n) index after an arrival at node k
    down: np.ndarray  # (S, n) index after a departure from node k
    Lsum: np.ndarray  # (S,) total loss rate
    Dk: np.ndarray  # (S, n) departure rates
    Lu: float
    blocked: np.ndarray  # (S, n) uint8, or shape (0, n) when nothing is blocked
    forbid_full: bool = True
    name: str = ""

    @property
    def n(self):
        return len(self.dims)

    @property
    def n_states(self):
        return self.occ.shape[0]

    def index(self, state):
        return int(np.ravel_multi_index(tuple(state), self.dims))

    def generator(self, probs):
        """Sparse CTMC generator and cost-rate vector under action probabilities."""
        S, n = self.n_states, self.n
        probs = self._admissible(probs)
        rows, cols, vals = [], [], []
        idx = np.arange(S)
        for k in range(n):
            rate = self.lam * probs[:, k + 1]
            move = self.up[:, k] != idx
            rows.append(idx[move])
            cols.append(self.up[move, k])
            vals.append(rate[move])
            move = self.Dk[:, k] > 0
            rows.append(idx[move])
            cols.append(self.down[move, k])
            vals.append(self.Dk[move, k])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        Q = sp.coo_matrix((vals, (rows, cols)), shape=(S, S)).tocsr()
        Q.sum_duplicates()
        Q = Q - sp.diags(np.asarray(Q.sum(axis=1)).ravel())
        cost = self.Lsum + self.lam * self.C * probs[:, 0]
        return Q.tocsc(), cost

    def _admissible(self, probs):
        probs = np.asarray(probs, dtype=float)
        if probs.shape != (self.n_states, self.n + 1):
            raise ValueError(f"action probabilities must have shape {(self.n_states, self.n + 1)}")
        if not self.blocked.size:
            return probs
        # mass on a forbidden full node goes to the external node instead
        probs = np.array(probs)
        moved = (probs[:, 1:] * self.blocked).sum(axis=1)
        probs[:, 1:] *= 1 - self.blocked
        probs[:, 0] += moved
        return probs


def build_chain(instance, truncation=None, forbid_full=True, state_cap=STATE_CAP):
    """Uniformized product chain of ``instance`` truncated at ``N`` jobs per node."""
    N = instance.truncation if truncation is None else int(truncation)
    if N < max(nd.m for nd in instance.nodes):
        raise ValueError("truncation must be at least every node's server count")
    dims = (N + 1,) * instance.n
    S = math.prod(dims)
    if S > state_cap:
        raise StateSpaceTooLarge(f"{S} states exceed the cap of {state_cap}")
    n = instance.n
    occ = np.indices(dims).reshape(n, -1).T.copy()
    strides = np.array([math.prod(dims[k + 1:]) for k in range(n)], dtype=np.int64)
    idx = np.arange(S, dtype=np.int64)
    up = np.empty((S, n), dtype=np.int64)
    down = np.empty((S, n), dtype=np.int64)
    Dk = np.empty((S, n))
    Lsum = np.zeros(S)
    env = instance.env
    Lu = instance.lam
    for k, nd in enumerate(instance.nodes):
        L, D = loss_rate_fn(nd, env).arrays(N)
        full = occ[:, k] == N
        up[:, k] = np.where(full, idx, idx + strides[k])
        down[:, k] = np.where(occ[:, k] == 0, idx, idx - strides[k])
        Dk[:, k] = D[occ[:, k]]
        Lsum += L[occ[:, k]]
        Lu += D[N]
    if forbid_full:
        blocked = (occ == N).astype(np.uint8)
    else:
        blocked = np.zeros((0, n), dtype=np.uint8)
    return UniformizedChain(
        lam=float(instance.lam), C=float(instance.C), dims=dims, occ=occ, up=up, down=down,
        Lsum=Lsum, Dk=np.ascontiguousarray(Dk), Lu=float(Lu), blocked=blocked,
        forbid_full=forbid_full, name=instance.name,
    )


@dataclass(frozen=True, eq=False)
class SolveResult:
    gain: float
    h: np.ndarray
    actions: np.ndarray
    iterations: int
    span: float
    method: str


@dataclass(frozen=True)
class EvalReport:
    policy: str
    gain: float
    profit: float
    method: str
    error: float = 0.0
    iterations: int = 0
    gap: float = math.nan
    provenance: dict = field(default_factory=dict, compare=False)

    def as_record(self, **extra):
        rec = dict(extra)
        rec.update(
            policy=self.policy, gain=self.gain, profit=self.profit, gap=self.gap,
            method=self.method, error=self.error, iterations=self.iterations,
        )
        return rec


def _rvi(chain, probs, tol, max_iter, ref, h0=None):
    h = np.zeros(chain.n_states) if h0 is None else np.array(h0, dtype=float)
    it, g_lo, g_hi, actions = kernels.rvi(
        h, chain.Lsum, chain.Dk, chain.up, chain.down, probs, chain.blocked,
        chain.lam, chain.C, chain.Lu, tol, int(max_iter), int(ref),
    )
    g = 0.5 * (g_lo + g_hi)
    span = g_hi - g_lo
    if not span <= tol * max(1.0, abs(g_hi)):
        raise NoConvergence(f"no convergence after {it} iterations", last_span=span)
    return g, h, actions, it, span


def _stationary(Q):
    # pi Q = 0 with the balance equation of state 0 replaced by normalization
    S = Q.shape[0]
    keep = np.ones(S)
    keep[0] = 0.0
    row = sp.csr_matrix((np.ones(S), (np.zeros(S, dtype=np.int64), np.arange(S))), shape=(S, S))
    A = sp.diags(keep) @ Q.T + row
    b = np.zeros(S)
    b[0] = 1.0
    pi = spsolve(A.tocsc(), b)
    return np.maximum(pi, 0.0) / np.maximum(pi, 0.0).sum()


def _bias(Q, cost, ref):
    # Q h = g - c with h(ref) = 0; the unknown in slot ref is g
    S = Q.shape[0]
    keep = np.ones(S)
    keep[ref] = 0.0
    col = sp.csc_matrix((-np.ones(S), (np.arange(S), np.full(S, ref))), shape=(S, S))
    x = spsolve((Q @ sp.diags(keep) + col).tocsc(), -cost)
    g = float(x[ref])
    h = np.array(x)
    h[ref] = 0.0
    return g, h


def _solve_direct(chain, probs, with_bias=True):
    """Gain from the stationary distribution; bias relative to the modal state.

    Anchoring the bias at a likely state keeps it well scaled; anchored at the
    empty state it grows like the (possibly astronomical) return time there.
    """
    Q, cost = chain.generator(probs)
    pi = _stationary(Q)
    g = float(pi @ cost)
    resid = float(np.abs(Q.T @ pi).max())
    if not with_bias:
        return g, None, resid
    ref = int(pi.argmax())
    g_b, h = _bias(Q, cost, ref)
    h -= h[0]
    resid = max(resid, abs(g_b - g))
    return g, h, resid


def stationary_distribution(chain, probs):
    """Stationary probabilities of the chain under ``probs`` (sparse direct solve)."""
    Q, _ = chain.generator(probs)
    return _stationary(Q)


def _greedy(chain, h, current=None):
    diff = h[chain.up] - h[:, None]
    if chain.blocked.size:
        diff = np.where(chain.blocked, np.inf, diff)
    best_k = diff.argmin(axis=1)
    best = np.minimum(diff[np.arange(chain.n_states), best_k], chain.C)
    actions = np.where(diff[np.arange(chain.n_states), best_k] <= chain.C, best_k + 1, 0)
    if current is not None:
        # keep the incumbent action when it is still optimal, so the loop cannot cycle on ties
        vals = np.concatenate((np.full((chain.n_states, 1), chain.C), diff), axis=1)
        cur_val = vals[np.arange(chain.n_states), current]
        keep = cur_val <= best + 1e-12 * max(1.0, float(np.abs(h).max()))
        actions = np.where(keep, current, actions)
    return actions.astype(np.int64)


def _one_hot(actions, width):
    out = np.zeros((len(actions), width))
    out[np.arange(len(actions)), actions] = 1.0
    return out


def solve_optimal(chain, tol=1e-10, max_iter=1_000_000, method="rvi", ref=0):
    """Minimal average cost rate of the truncated chain and a greedy optimal policy.

    ``method="rvi"`` runs relative value iteration with the empty state as
    reference and stops once the gain bounds from one sweep (the extreme
    entries of ``Lu (h_{t+1} - h_t)``) differ by at most ``tol * max(1, |g|)``.
    ``method="policy_iteration"`` alternates direct Poisson solves with greedy
    improvement and is much faster on chains that fit a sparse solver.
    """
    if method == "rvi":
        g, h, actions, it, span = _rvi(chain, np.empty((0, chain.n + 1)), tol, max_iter, ref)
        return SolveResult(g, h, actions, it, span, "rvi")
    if method != "policy_iteration":
        raise ValueError(f"unknown method {method!r}")
    actions = np.zeros(chain.n_states, dtype=np.int64)
    for it in range(1, 1000):
        g, h, resid = _solve_direct(chain, _one_hot(actions, chain.n + 1))
        new = _greedy(chain, h, actions)
        if np.array_equal(new, actions):
            return SolveResult(g, h, actions, it, resid, "policy_iteration")
        actions = new
    raise NoConvergence("policy iteration did not settle", last_span=resid)


def evaluate_policy(chain, policy, method="auto", tol=1e-12, max_iter=1_000_000):
    """Exact average cost rate and profit per job of a stationary policy.

    ``method="auto"`` uses a sparse direct solve when the chain has at most
    ``DIRECT_LIMIT`` states and at most two nodes, and policy-restricted RVI
    otherwise (LU fill-in on three-dimensional grids makes direct solves slow).
    """
    probs = np.ascontiguousarray(policy.action_probs(chain.dims), dtype=float)
    if method == "auto":
        method = "direct" if chain.n_states <= DIRECT_LIMIT and chain.n <= 2 else "rvi"
    if method == "direct":
        g, _, resid = _solve_direct(chain, probs, with_bias=False)
        err, it = resid, 1
    elif method == "rvi":
        probs = chain._admissible(probs)
        g, _, _, it, err = _rvi(chain, probs, tol, max_iter, 0)
    else:
        raise ValueError(f"unknown method {method!r}")
    name = getattr(policy, "name", type(policy).__name__)
    return EvalReport(
        policy=name, gain=g, profit=1.0 - g / chain.lam, method=f"exact-{method}",
        error=float(err), iterations=int(it),
        provenance={"states": chain.n_states, "truncation": chain.dims[0] - 1,
                    "forbid_full": chain.forbid_full, "backend": kernels.BACKEND},
    )


def optimality_gap(z_star, z_pi):
    """Percent profit shortfall ``100 (z* - z) / z*``."""
    if not z_star > 0:
        raise DegenerateBaseline(f"optimal profit per job must be positive, got {z_star!r}")
    return 100.0 * (z_star - z_pi) / z_star
