"""Profit-maximizing routing of jobs with firm deadlines to parallel M/M/m+M queues.

Submodules:

``queueing``  single-node Erlang-A analytics under DBS and DES deadlines
``split``     optimal Bernoulli splitting
``indices``   IO, PI and RB routing indices and the index routing rule
``mdp``       exact optimal and policy evaluation on the truncated chain
``sim``       discrete-event simulation
``bench``     gap study and parameter sweeps
"""

__version__ = "0.1.0"

from cloudq.errors import (  # noqa: E402
    CloudQError,
    DegenerateBaseline,
    IndexabilityViolation,
    InfeasibleSplit,
    InstanceFormatError,
    NoConvergence,
    RootBracketFailure,
    StateSpaceTooLarge,
    TruncationWarning,
    ValidationFailure,
)
from cloudq.instance import Instance, base_instance, load_instance, parse_instance  # noqa: E402
from cloudq.queueing import AbandonmentEnv, NodeParams, Regime  # noqa: E402

__all__ = [
    "__version__",
    "AbandonmentEnv",
    "CloudQError",
    "DegenerateBaseline",
    "IndexabilityViolation",
    "InfeasibleSplit",
    "Instance",
    "InstanceFormatError",
    "NodeParams",
    "NoConvergence",
    "Regime",
    "RootBracketFailure",
    "StateSpaceTooLarge",
    "TruncationWarning",
    "ValidationFailure",
    "base_instance",
    "load_instance",
    "parse_instance",
]
