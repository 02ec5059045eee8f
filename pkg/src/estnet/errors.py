"""Exception hierarchy shared across the package."""


class EstnetError(Exception):
    """Base class for all package errors."""


class DimensionError(EstnetError):
    """Matrix is empty or has incompatible dimensions."""


class ShapeError(EstnetError):
    """Matrix violates a structural requirement (e.g. materially asymmetric)."""


class ParameterError(EstnetError):
    """A scalar parameter is outside its admissible range."""


class ConfigError(EstnetError):
    """Model configuration document is invalid."""


class TopologyError(EstnetError):
    """Operation referenced a subsystem pair that is not coupled."""


class ProtocolError(EstnetError):
    """A required neighbor message is missing."""


class NumericalError(EstnetError):
    """A numerically impossible quantity was produced (e.g. negative variance)."""


class InfeasibleBeta(EstnetError):
    """No positive stability parameter exists for a subsystem."""

    def __init__(self, subsystem, pair, message):
        super().__init__(message)
        self.subsystem = subsystem
        self.pair = pair


class GainInfeasible(EstnetError):
    """Gain design failed after exhausting the fallback chain."""

    def __init__(self, subsystem, step, message):
        super().__init__(message)
        self.subsystem = subsystem
        self.step = step


class SolverError(EstnetError):
    """The SDP solver failed in an unexpected way."""
