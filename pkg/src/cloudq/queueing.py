"""Exact analytics for a single M/M/m+M node with firm deadlines.

A node has ``m`` exponential servers of rate ``mu`` and an unlimited FCFS
buffer.  Jobs carry exponential relative deadlines of rate ``theta``.  Under
DBS a job abandons if its service has not *started* by the deadline; under
DES it abandons if service has not *ended* by then.

The loss rate ``ell(lam) = lam * P_ab(lam)`` and its derivative are what the
split optimizer needs.  DBS quantities come from Palm's formulas, evaluated
through a scaled series so they neither overflow nor cancel; DES quantities
are obtained from the DBS ones at server rate ``mu + theta``.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from cloudq.errors import TruncationWarning

__all__ = [
    "Regime",
    "NodeParams",
    "AbandonmentEnv",
    "NodeStateRates",
    "loss_rate_fn",
    "erlang_b",
    "erlang_c_ext",
    "palm_w",
    "log_palm_w",
    "p_wait_dbs",
    "p_abandon_dbs",
    "p_abandon",
    "loss_rate",
    "loss_rate_deriv",
    "alpha_floor",
    "default_oracle_truncation",
    "steady_state_oracle",
]


class Regime(enum.Enum):
    DBS = "dbs"
    DES = "des"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown deadline regime {value!r} (expected dbs or des)") from None


@dataclass(frozen=True)
class NodeParams:
    m: int
    mu: float

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"server count must be a positive integer, got {self.m!r}")
        if not self.mu > 0:
            raise ValueError(f"service rate must be positive, got {self.mu!r}")
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "mu", float(self.mu))

    @property
    def capacity(self):
        return self.m * self.mu


@dataclass(frozen=True)
class AbandonmentEnv:
    theta: float
    regime: Regime = Regime.DBS

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"abandonment rate must be positive, got {self.theta!r}")
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "regime", Regime.parse(self.regime))


@dataclass(frozen=True)
class NodeStateRates:
    """State-indexed loss rate ``L(i)`` and total death rate ``D(i)`` of a node.

    Both accept scalars or integer arrays.
    """

    m: int
    mu: float
    theta: float
    regime: Regime

    def L(self, i):
        i = np.asarray(i)
        if self.regime is Regime.DBS:
            out = np.maximum(i - self.m, 0) * self.theta
        else:
            out = i * self.theta
        return out.astype(float) if out.ndim else float(out)

    def D(self, i):
        i = np.asarray(i)
        out = np.minimum(i, self.m) * self.mu + self.L(i)
        return out.astype(float) if np.ndim(out) else float(out)

    def arrays(self, N):
        """``(L, D)`` as float arrays over states ``0..N``."""
        i = np.arange(N + 1)
        return self.L(i), self.D(i)


def loss_rate_fn(node, env):
    """Per-state loss and death rates of ``node`` under ``env``."""
    return NodeStateRates(node.m, node.mu, env.theta, env.regime)


def _erlang_b_inv(m, r):
    # 1/B_m(r), via the stable inverse recursion; r > 0
    inv = 1.0
    for k in range(1, m + 1):
        inv = 1.0 + (k / r) * inv
    return inv


def _erlang_b_pair(m, r):
    """Return ``(B_m(r), 1 - B_m(r))`` without forming ``1 - B`` by subtraction."""
    if r <= 0.0:
        return (1.0, 0.0) if m == 0 else (0.0, 1.0)
    inv = _erlang_b_inv(m, r)
    if math.isinf(inv):
        return 0.0, 1.0
    return 1.0 / inv, (inv - 1.0) / inv


def erlang_b(m, r):
    """Erlang-B blocking probability of an M/M/m/m queue with offered load ``r``."""
    if r < 0:
        raise ValueError("offered load must be nonnegative")
    return _erlang_b_pair(int(m), float(r))[0]


def erlang_c_ext(m, r):
    """Extended Erlang-C function ``B / (1 - (r/m)(1 - B))``.

    For ``r < m`` this is the M/M/m wait probability.  For ``r >= m`` the
    same expression is kept as an analytic continuation; it exceeds one and
    grows without bound.
    """
    m = int(m)
    if r < 0:
        raise ValueError("offered load must be nonnegative")
    if r == 0.0:
        return 0.0
    b, one_minus_b = _erlang_b_pair(m, r)
    return b / (1.0 - (r / m) * one_minus_b)


# Series for W: t_j = x^j / ((beta+1)...(beta+j)), j >= 0, x = lam/theta.
_SERIES_RTOL = 1e-15
_SERIES_CAP = 1_000_000


def _palm_series(x, beta):
    """Scaled partial sums of Palm's series.

    Returns ``(log_scale, w, s1)`` with ``W = exp(log_scale) * w`` and
    ``sum_j j t_j = exp(log_scale) * s1``.
    """
    if x == 0.0:
        return 0.0, 1.0, 0.0
    logx = math.log(x)
    # terms peak near j = x - beta and then decay faster than geometrically
    K = int(max(0.0, x - beta) + 12.0 * math.sqrt(x + 1.0) + 64)
    while True:
        K = min(K, _SERIES_CAP)
        j = np.arange(1, K + 1, dtype=float)
        logt = np.empty(K + 1)
        logt[0] = 0.0
        np.cumsum(logx - np.log(beta + j), out=logt[1:])
        top = logt.max()
        t = np.exp(logt - top)
        w = t.sum()
        if t[-1] <= _SERIES_RTOL * w or K == _SERIES_CAP:
            break
        K *= 2
    s1 = float(np.dot(np.arange(K + 1, dtype=float), t))
    return top, float(w), s1


def log_palm_w(lam, node, theta):
    """Natural log of Palm's ``W(lam)``; finite even where ``W`` overflows."""
    if lam < 0:
        raise ValueError("arrival rate must be nonnegative")
    top, w, _ = _palm_series(lam / theta, node.m * node.mu / theta)
    return top + math.log(w)


def palm_w(lam, node, theta):
    """Palm's ``W(lam) = 1 + sum_i (lam/theta)^i / ((beta+1)...(beta+i))``.

    ``beta = m mu / theta``.  Returns ``inf`` when the value overflows a
    double; use :func:`log_palm_w` in that regime.
    """
    lw = log_palm_w(lam, node, theta)
    return math.exp(lw) if lw < 709.0 else math.inf


def _dbs_parts(lam, m, mu, theta):
    # (B, 1-B, 1/W, E_t[j]) for the DBS node; lam > 0
    top, w, s1 = _palm_series(lam / theta, m * mu / theta)
    b, one_minus_b = _erlang_b_pair(m, lam / mu)
    inv_w = math.exp(-top) / w
    return b, one_minus_b, inv_w, s1 / w


def p_wait_dbs(lam, node, theta):
    """Probability that an arrival finds all servers busy (DBS node)."""
    if lam <= 0.0:
        return 0.0
    b, one_minus_b, inv_w, _ = _dbs_parts(lam, node.m, node.mu, theta)
    if b == 0.0:
        return 0.0
    return b / (b + one_minus_b * inv_w)


def _loss_rate_dbs(lam, m, mu, theta):
    if lam <= 0.0:
        return 0.0
    b, one_minus_b, inv_w, mean_j = _dbs_parts(lam, m, mu, theta)
    if b == 0.0:
        return 0.0
    # theta * E[queue length] = theta * P_wait * E_t[j]
    return theta * b * mean_j / (b + one_minus_b * inv_w)


def p_abandon_dbs(lam, node, theta):
    """Abandonment probability of a random arrival to a DBS node.

    Equivalent to Palm's ``(1/W + rho - 1) P_wait / rho``; the bracket is
    evaluated as ``sum_j j t_j / (beta W)`` so there is no cancellation at
    light load.
    """
    if lam <= 0.0:
        return 0.0
    return _loss_rate_dbs(lam, node.m, node.mu, theta) / lam


def loss_rate(lam, node, env):
    """Mean abandonment rate ``ell(lam) = lam * P_ab(lam)``.

    DES is evaluated through the identity
    ``(mu + theta) ell_DES(mu) = lam theta + mu ell_DBS(mu + theta)``.
    """
    if lam < 0:
        raise ValueError("arrival rate must be nonnegative")
    if lam == 0.0:
        return 0.0
    m, mu, theta = node.m, node.mu, env.theta
    if env.regime is Regime.DBS:
        return _loss_rate_dbs(lam, m, mu, theta)
    return (lam * theta + mu * _loss_rate_dbs(lam, m, mu + theta, theta)) / (mu + theta)


def p_abandon(lam, node, env):
    """Abandonment probability of a random arrival under either regime."""
    if lam <= 0.0:
        return alpha_floor(node, env)
    return loss_rate(lam, node, env) / lam


def _loss_rate_deriv_dbs(lam, m, mu, theta):
    if lam <= 0.0:
        return 0.0
    ell = _loss_rate_dbs(lam, m, mu, theta)
    r = lam / mu
    rho = r / m
    beta = m * mu / theta
    b, one_minus_b = _erlang_b_pair(m, r)
    if b == 0.0:
        return 0.0
    c = b / (1.0 - rho * one_minus_b)
    d = (c - (c / b - 1.0 + (beta - m) * (1.0 - rho)) * ell / lam
         - (mu - theta) / (mu * theta) * ell * ell / lam)
    return min(max(d, 0.0), 1.0)


def loss_rate_deriv(lam, node, env):
    """Derivative ``ell'(lam)``; at ``lam = 0`` returns the right limit.

    The right limit is 0 under DBS and ``theta / (theta + mu)`` under DES.
    Values are clipped to ``[0, 1]``, which only matters at rounding level in
    deep overload.
    """
    if lam < 0:
        raise ValueError("arrival rate must be nonnegative")
    m, mu, theta = node.m, node.mu, env.theta
    if env.regime is Regime.DBS:
        return _loss_rate_deriv_dbs(lam, m, mu, theta)
    return (theta + mu * _loss_rate_deriv_dbs(lam, m, mu + theta, theta)) / (mu + theta)


def alpha_floor(node, env):
    """Abandonment probability of a job sent to an empty node, ``ell'(0+)``."""
    if env.regime is Regime.DBS:
        return 0.0
    return env.theta / (env.theta + node.mu)


def default_oracle_truncation(lam, node, env):
    return max(400, node.m + math.ceil(20.0 * lam / env.theta))


def steady_state_oracle(lam, node, env, N=None):
    """Stationary distribution of the node's birth-death chain on ``0..N``.

    Birth rate ``lam`` in every state below ``N``, death rate ``D(i)``.  This
    is a brute-force check on the closed forms, not a production path.  A
    :class:`TruncationWarning` is issued when the mass at ``N`` exceeds 1e-12.
    """
    if N is None:
        N = default_oracle_truncation(lam, node, env)
    if N < node.m:
        raise ValueError("truncation must be at least the server count")
    p = np.zeros(N + 1)
    if lam == 0.0:
        p[0] = 1.0
        return p
    _, D = loss_rate_fn(node, env).arrays(N)
    logq = np.empty(N + 1)
    logq[0] = 0.0
    np.cumsum(math.log(lam) - np.log(D[1:]), out=logq[1:])
    q = np.exp(logq - logq.max())
    p = q / q.sum()
    if p[-1] > 1e-12:
        warnings.warn(f"tail mass {p[-1]:.3e} at truncation N={N}", TruncationWarning, stacklevel=2)
    return p
