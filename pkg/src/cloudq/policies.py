"""Stationary routing policies shared by the exact evaluator and the simulator.

Every policy answers two questions over a product grid of node occupancies:
the probability of each destination (``action_probs``) and, for the
simulator, a compact routing rule (``sim_routing``).  Destination 0 is the
external node, ``k >= 1`` the ``k``-th basic node in instance file order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cloudq.indices import Family, index_tables, route, route_table
from cloudq.split import SplitVector, optimal_bs

__all__ = [
    "BernoulliSplit",
    "IndexPolicy",
    "LookupPolicy",
    "make_policy",
    "POLICY_NAMES",
]

POLICY_NAMES = ("bs", "io", "pi", "rb", "external")


@dataclass(frozen=True)
class BernoulliSplit:
    """Static randomized routing with probabilities ``rates / lam``."""

    split: SplitVector
    name: str = "bs"

    @property
    def probabilities(self):
        return self.split.probabilities

    def action_probs(self, dims):
        S = int(np.prod(dims))
        return np.broadcast_to(self.probabilities, (S, len(self.probabilities)))

    def sim_routing(self, dims):
        cum = np.cumsum(self.probabilities)
        cum[-1] = 1.0
        return 0, cum, np.zeros(1, dtype=np.int64)

    def decide(self, state, u):
        """Destination for uniform draw ``u`` (state is ignored)."""
        cum = self.sim_routing(None)[1]
        return int(np.searchsorted(cum, u, side="right"))


@dataclass(frozen=True)
class IndexPolicy:
    """Route to the lowest current index if it does not exceed ``C``."""

    family: Family
    tables: tuple
    C: float
    name: str = ""
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        object.__setattr__(self, "tables", tuple(self.tables))
        if not self.name:
            object.__setattr__(self, "name", self.family.value)

    def decide(self, state, u=None):
        return route(state, self.tables, self.C)

    def actions(self, dims):
        return route_table(self.tables, self.C, dims)

    def action_probs(self, dims):
        return _one_hot(self.actions(dims), len(self.tables) + 1)

    def sim_routing(self, dims):
        return 1, np.ones(1), self.actions(dims)


@dataclass(frozen=True)
class LookupPolicy:
    """Deterministic action table over the product grid ``dims`` (C order)."""

    table: np.ndarray
    dims: tuple
    name: str = "lookup"

    def __post_init__(self):
        tab = np.asarray(self.table, dtype=np.int64)
        dims = tuple(int(d) for d in self.dims)
        if tab.shape != (int(np.prod(dims)),):
            raise ValueError(f"action table of shape {tab.shape} does not match grid {dims}")
        if tab.min() < 0 or tab.max() > len(dims):
            raise ValueError("actions must lie in 0..n")
        tab.setflags(write=False)
        object.__setattr__(self, "table", tab)
        object.__setattr__(self, "dims", dims)

    def decide(self, state, u=None):
        idx = np.ravel_multi_index(tuple(np.minimum(state, np.array(self.dims) - 1)), self.dims)
        return int(self.table[idx])

    def actions(self, dims):
        if tuple(dims) != self.dims:
            raise ValueError(f"policy defined on grid {self.dims}, asked for {tuple(dims)}")
        return self.table

    def action_probs(self, dims):
        return _one_hot(self.actions(dims), len(self.dims) + 1)

    def sim_routing(self, dims):
        return 1, np.ones(1), self.actions(dims)


def _one_hot(actions, width):
    out = np.zeros((len(actions), width))
    out[np.arange(len(actions)), actions] = 1.0
    return out


def make_policy(instance, name, split=None, pi_method="stable"):
    """Build a named policy (``bs``, ``io``, ``pi``, ``rb`` or ``external``)."""
    name = name.lower()
    if name in ("bs", "pi") and split is None:
        split = optimal_bs(instance)
    if name == "bs":
        return BernoulliSplit(split)
    if name == "external":
        rates = np.zeros(instance.n + 1)
        rates[0] = instance.lam
        return BernoulliSplit(SplitVector(rates, method="all-external"), name="external")
    if name in ("io", "pi", "rb"):
        tables = index_tables(instance, name, split=split, pi_method=pi_method)
        return IndexPolicy(name, tables, instance.C)
    raise ValueError(f"unknown policy {name!r}; expected one of {', '.join(POLICY_NAMES)}")
