"""Optimal Bernoulli splitting of the arrival stream.

A Bernoulli split sends each arrival to node ``k`` with probability
``lam_k / lam`` (node 0 is the external pool).  Node ``k`` then behaves as an
M/M/m_k+M queue fed at rate ``lam_k``, so the split cost is
``sum_k ell_k(lam_k) + C lam_0``.  With convex ``ell_k`` the optimum
equalizes marginal losses: every used basic node runs at
``ell_k'(lam_k) = alpha*`` where ``alpha* = min(C, C*(lam))`` and ``C*(lam)``
is the marginal loss at which the basic nodes alone absorb all traffic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from cloudq.errors import InfeasibleSplit, RootBracketFailure
from cloudq.queueing import alpha_floor, loss_rate, loss_rate_deriv

log = logging.getLogger(__name__)

__all__ = [
    "SplitVector",
    "alpha_floor",
    "lambda_star",
    "big_lambda_star",
    "c_star",
    "optimal_bs",
    "bs_objective",
    "kkt_residual",
]

_ROOT_TOL = 1e-10
_EDGE = 1e-12
_MAX_DOUBLINGS = 200


@dataclass(frozen=True)
class SplitVector:
    """Rates ``(lam_0, lam_1, ..., lam_n)``; index 0 is the external node."""

    rates: np.ndarray
    alpha_star: float = math.nan
    c_star: float = math.nan
    method: str = "kkt"
    notes: tuple = field(default=(), compare=False)

    def __post_init__(self):
        rates = np.asarray(self.rates, dtype=float)
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    @property
    def external(self):
        return float(self.rates[0])

    @property
    def basic(self):
        return self.rates[1:]

    @property
    def total(self):
        return float(self.rates.sum())

    @property
    def probabilities(self):
        return self.rates / self.rates.sum()


def lambda_star(node, env, alpha):
    """Arrival rate at which ``node`` has marginal loss ``alpha``.

    Returns 0 for ``alpha <= alpha_k`` and ``math.inf`` for ``alpha >= 1``;
    otherwise the unique root of ``ell'(lam) = alpha``.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    a_k = alpha_floor(node, env)
    if alpha <= a_k:
        return 0.0
    if alpha >= 1.0:
        return math.inf

    def f(lam):
        return loss_rate_deriv(lam, node, env) - alpha

    hi = node.capacity
    for _ in range(_MAX_DOUBLINGS):
        if f(hi) > 0.0:
            break
        hi *= 2.0
    else:
        raise RootBracketFailure(
            f"ell' stays below {alpha} up to lam={hi:.3g} (m={node.m}, mu={node.mu})"
        )
    root = brentq(f, 0.0, hi, xtol=1e-14 * hi, rtol=4 * np.finfo(float).eps, maxiter=500)
    resid = abs(f(root))
    if resid > 1e-8:
        # brentq brackets a sign change; a large residual there means ell' jumps
        raise RootBracketFailure(f"ell'(lam) - alpha = {resid:.3g} at the bracketed root {root:.6g}")
    return root


def big_lambda_star(instance, alpha):
    """Total basic-node rate ``sum_k lambda_star_k(alpha)``."""
    env = instance.env
    total = 0.0
    for nd in instance.nodes:
        total += lambda_star(nd, env, alpha)
        if math.isinf(total):
            break
    return total


def _c_star_bracketed(instance, lo, hi):
    lam = instance.lam

    def g(a):
        return big_lambda_star(instance, a) - lam

    return brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def c_star(instance):
    """Marginal loss ``C*(lam)`` at which the basic nodes absorb all of ``lam``.

    Root of ``big_lambda_star(alpha) = lam`` in ``(alpha_1, 1)``.
    """
    lam = instance.lam
    a1 = float(instance.alphas.min())
    lo = a1 + _EDGE
    hi = 0.5 * (a1 + 1.0)
    for _ in range(_MAX_DOUBLINGS):
        if big_lambda_star(instance, hi) >= lam:
            break
        lo = hi
        hi = 0.5 * (hi + 1.0)
        if hi >= 1.0 - _EDGE:
            hi = 1.0 - _EDGE
            break
    if big_lambda_star(instance, hi) < lam:
        raise RootBracketFailure(f"basic nodes absorb less than lam={lam:.6g} even at alpha={hi!r}")
    return _c_star_bracketed(instance, lo, hi)


def bs_objective(instance, split):
    """Cost rate ``sum_k ell_k(lam_k) + C lam_0`` of a Bernoulli split."""
    rates = np.asarray(getattr(split, "rates", split), dtype=float)
    if rates.shape != (instance.n + 1,):
        raise InfeasibleSplit(f"expected {instance.n + 1} rates, got shape {rates.shape}")
    if np.any(rates < 0):
        raise InfeasibleSplit(f"negative split component in {rates}")
    if abs(rates.sum() - instance.lam) > 1e-10 * instance.lam:
        raise InfeasibleSplit(f"split sums to {rates.sum()!r}, arrival rate is {instance.lam!r}")
    env = instance.env
    cost = instance.C * rates[0]
    for nd, r in zip(instance.nodes, rates[1:]):
        cost += loss_rate(r, nd, env)
    return cost


def kkt_residual(instance, split, alpha):
    """Largest violation of the first-order optimality conditions at ``alpha``."""
    env = instance.env
    rates = split.rates if isinstance(split, SplitVector) else np.asarray(split, float)
    worst = max(alpha - instance.C, 0.0)
    if rates[0] > 0:
        worst = max(worst, abs(instance.C - alpha))
    for nd, r in zip(instance.nodes, rates[1:]):
        if r > 0:
            worst = max(worst, abs(loss_rate_deriv(r, nd, env) - alpha))
        else:
            worst = max(worst, alpha - alpha_floor(nd, env))
    return worst


def _project_scaled_simplex(v, total):
    # Euclidean projection onto {x >= 0, sum x = total}
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, len(v) + 1)
    k = idx[u - css / idx > 0][-1]
    tau = css[k - 1] / k
    return np.maximum(v - tau, 0.0)


def _projected_gradient_split(instance, iters=5000):
    lam = instance.lam
    env = instance.env
    x = np.full(instance.n + 1, lam / (instance.n + 1))

    def grad(x):
        g = [instance.C]
        g += [loss_rate_deriv(r, nd, env) for nd, r in zip(instance.nodes, x[1:])]
        return np.array(g)

    f = bs_objective(instance, x)
    step = lam
    for _ in range(iters):
        g = grad(x)
        while step > 1e-14 * lam:
            y = _project_scaled_simplex(x - step * g, lam)
            y *= lam / y.sum()
            fy = bs_objective(instance, y)
            if fy <= f - 1e-4 * np.dot(g, x - y):
                break
            step *= 0.5
        else:
            break
        if np.max(np.abs(y - x)) <= 1e-13 * lam:
            x, f = y, fy
            break
        x, f = y, fy
        step *= 2.0
    return x


def optimal_bs(instance):
    """Optimal Bernoulli split for ``instance``.

    Falls back to projected-gradient descent on the split cost if a
    marginal-cost root cannot be bracketed; the result's ``method`` field
    records which path produced it.
    """
    lam = instance.lam
    env = instance.env
    C = instance.C
    try:
        if C < 1.0:
            base = big_lambda_star(instance, C)
        else:
            base = math.inf
        if base <= lam:
            alpha = C
            cs = c_star(instance) if base < lam else C
            basic = np.array([lambda_star(nd, env, alpha) for nd in instance.nodes])
            ext = max(lam - basic.sum(), 0.0)
        else:
            a1 = float(instance.alphas.min())
            cs = _c_star_bracketed(instance, a1 + _EDGE, C) if C < 1.0 else c_star(instance)
            alpha = cs
            basic = np.array([lambda_star(nd, env, alpha) for nd in instance.nodes])
            # the root is exact to rounding; pin the sum to lam exactly
            basic *= lam / basic.sum()
            ext = 0.0
        rates = np.concatenate(([ext], basic))
        return SplitVector(rates, alpha_star=alpha, c_star=cs, method="kkt")
    except RootBracketFailure as exc:
        log.warning("marginal-cost root failed (%s); using projected gradient", exc)
        rates = _projected_gradient_split(instance)
        used = [loss_rate_deriv(r, nd, env) for nd, r in zip(instance.nodes, rates[1:]) if r > 0]
        alpha = C if rates[0] > 0 or not used else max(used)
        return SplitVector(rates, alpha_star=alpha, method="projected_gradient", notes=(str(exc),))
