"""Problem instances and the flat key-value instance file format.

Instance files look like::

    # base instance 1
    regime = dbs
    lambda = 60
    theta = 0.3
    C = 0.2
    truncation = 80
    node.m = 2
    node.mu = 10
    node.m = 5
    node.mu = 4

``node.m`` / ``node.mu`` pairs repeat once per basic node, in order.  Blank
lines and ``#`` comments are ignored; an optional ``name`` key labels the
instance.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from cloudq.errors import InstanceFormatError
from cloudq.queueing import AbandonmentEnv, NodeParams, Regime, alpha_floor

DEFAULT_TRUNCATION = 80


@dataclass(frozen=True)
class Instance:
    regime: Regime
    lam: float
    theta: float
    C: float
    nodes: tuple
    truncation: int = DEFAULT_TRUNCATION
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime.parse(self.regime))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if not self.nodes:
            raise ValueError("an instance needs at least one basic node")
        if not self.lam > 0:
            raise ValueError(f"arrival rate must be positive, got {self.lam!r}")
        if not self.theta > 0:
            raise ValueError(f"abandonment rate must be positive, got {self.theta!r}")
        if not self.C > 0:
            raise ValueError(f"external cost must be positive, got {self.C!r}")
        if self.truncation < max(nd.m for nd in self.nodes):
            raise ValueError("truncation must be at least every node's server count")

    @property
    def n(self):
        return len(self.nodes)

    @property
    def env(self):
        return AbandonmentEnv(self.theta, self.regime)

    @property
    def alphas(self):
        """Abandonment probability at an empty node, per node in file order."""
        env = self.env
        return np.array([alpha_floor(nd, env) for nd in self.nodes])

    @property
    def speed_order(self):
        """Node positions sorted by nondecreasing ``alpha`` (fastest first under DES).

        The sort is stable, so DBS keeps the file order.
        """
        return tuple(int(k) for k in np.argsort(self.alphas, kind="stable"))

    @property
    def capacity(self):
        return sum(nd.capacity for nd in self.nodes)

    @property
    def load(self):
        """Nominal load ``lam / sum_k m_k mu_k``."""
        return self.lam / self.capacity

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_node(self, k, **changes):
        nodes = list(self.nodes)
        nodes[k] = dataclasses.replace(nodes[k], **changes)
        return self.replace(nodes=tuple(nodes))

    def to_text(self):
        lines = []
        if self.name:
            lines.append(f"name = {self.name}")
        lines += [
            f"regime = {self.regime.value}",
            f"lambda = {self.lam!r}",
            f"theta = {self.theta!r}",
            f"C = {self.C!r}",
            f"truncation = {self.truncation}",
        ]
        for nd in self.nodes:
            lines.append(f"node.m = {nd.m}")
            lines.append(f"node.mu = {nd.mu!r}")
        return "\n".join(lines) + "\n"


_SCALAR_KEYS = {"regime", "lambda", "theta", "C", "truncation", "name"}
_REQUIRED = ("regime", "lambda", "theta", "C")


def parse_instance(text, source="<string>"):
    """Parse instance-file text; raises :class:`InstanceFormatError` with a line number."""
    values = {}
    ms, mus = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InstanceFormatError(f"{source}: expected 'key = value', got {raw.strip()!r}", lineno)
        key, _, value = (s.strip() for s in line.partition("="))
        if not value:
            raise InstanceFormatError(f"{source}: empty value for {key!r}", lineno)
        try:
            if key == "node.m":
                m = float(value)
                if m != int(m):
                    raise ValueError(value)
                ms.append((int(m), lineno))
            elif key == "node.mu":
                mus.append((float(value), lineno))
            elif key in _SCALAR_KEYS:
                if key in values:
                    raise InstanceFormatError(f"{source}: duplicate key {key!r}", lineno)
                if key == "regime":
                    values[key] = (Regime.parse(value), lineno)
                elif key == "truncation":
                    values[key] = (int(value), lineno)
                elif key == "name":
                    values[key] = (value, lineno)
                else:
                    values[key] = (float(value), lineno)
            else:
                raise InstanceFormatError(f"{source}: unknown key {key!r}", lineno)
        except InstanceFormatError:
            raise
        except ValueError as exc:
            raise InstanceFormatError(f"{source}: bad value for {key!r}: {exc}", lineno) from None
    for key in _REQUIRED:
        if key not in values:
            raise InstanceFormatError(f"{source}: missing required key {key!r}")
    if len(ms) != len(mus):
        lineno = (ms + mus)[-1][1] if ms or mus else None
        raise InstanceFormatError(f"{source}: node.m and node.mu counts differ ({len(ms)} vs {len(mus)})", lineno)
    if not ms:
        raise InstanceFormatError(f"{source}: no basic nodes (node.m / node.mu) given")
    try:
        nodes = tuple(NodeParams(m, mu) for (m, _), (mu, _) in zip(ms, mus))
        return Instance(
            regime=values["regime"][0],
            lam=values["lambda"][0],
            theta=values["theta"][0],
            C=values["C"][0],
            nodes=nodes,
            truncation=values.get("truncation", (DEFAULT_TRUNCATION, None))[0],
            name=values.get("name", ("", None))[0],
        )
    except ValueError as exc:
        raise InstanceFormatError(f"{source}: {exc}") from None


def load_instance(path):
    path = Path(path)
    return parse_instance(path.read_text(), source=str(path))


def base_instance(k, regime=Regime.DBS, truncation=DEFAULT_TRUNCATION):
    """One of the three shipped three-node base instances (``k`` in 1..3)."""
    if k not in (1, 2, 3):
        raise ValueError("base instances are numbered 1..3")
    text = resources.files("cloudq.data").joinpath(f"base{k}.cfg").read_text()
    inst = parse_instance(text, source=f"base{k}.cfg")
    return inst.replace(regime=Regime.parse(regime), truncation=truncation)
