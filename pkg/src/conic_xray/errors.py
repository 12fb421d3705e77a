"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class ConicXrayError(Exception):
    """Base class for toolkit errors."""


class ContractViolation(ConicXrayError):
    """An input violated a documented precondition (unit covector, metric mismatch, ...)."""


class DomainError(ConicXrayError, ValueError):
    """A point or parameter lies outside the region where an operation is defined."""


class ArgumentError(ConicXrayError, ValueError):
    """An argument is out of its admissible range."""


class IntegrationFailure(ConicXrayError):
    """The ODE integrator could not proceed; ``last_state`` holds the last accepted state."""

    def __init__(self, message: str, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class FoliationViolation(ConicXrayError):
    """Level sets of x failed the strict concavity check."""


class CertificationError(ConicXrayError):
    """An operator was requested on a metric without a passing certificate."""


class SizeError(ConicXrayError):
    """A dense assembly would exceed the configured size cap."""


class StagnationError(ConicXrayError):
    """An iterative solver stopped making progress."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class ConfigError(ConicXrayError, ValueError):
    """Malformed or inconsistent experiment configuration."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
