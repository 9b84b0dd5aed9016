"""Exception and warning types raised by the toolkit."""


class CloudQError(Exception):
    """Base class for all toolkit errors."""


class TruncationWarning(UserWarning):
    """Tail mass of a truncated birth-death distribution is not negligible."""


class RootBracketFailure(CloudQError):
    """A monotone bracket for a marginal-cost root could not be established.

    This usually means the loss-rate function is not convex for the node in
    question, so the first-order conditions no longer pin down the split.
    """


class InfeasibleSplit(CloudQError):
    """A split vector has negative components or does not sum to the arrival rate."""


class IndexabilityViolation(CloudQError):
    """A Whittle index table came out decreasing in the state."""


class StateSpaceTooLarge(CloudQError):
    """The truncated product chain exceeds the configured state cap."""


class NoConvergence(CloudQError):
    """An iterative solver stopped at its iteration cap."""

    def __init__(self, message, last_span=None):
        super().__init__(message)
        self.last_span = last_span


class ValidationFailure(CloudQError):
    """Simulated and exact cost rates disagree beyond the confidence band."""

    def __init__(self, message, simulated=None, exact=None):
        super().__init__(message)
        self.simulated = simulated
        self.exact = exact


class DegenerateBaseline(CloudQError):
    """Optimal profit per job is not positive, so relative gaps are undefined."""


class InstanceFormatError(CloudQError):
    """An instance file could not be parsed."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno
