"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class RateCascadeError(Exception):
    """Base class for all package errors."""


class DimensionError(RateCascadeError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(RateCascadeError, ValueError):
    """A documented precondition was violated."""


class ConfigError(RateCascadeError, ValueError):
    """A configuration object is internally inconsistent."""


class ParseError(RateCascadeError, ValueError):
    """A parallel-config string could not be parsed."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at position {position})")


class PlanError(RateCascadeError, ValueError):
    """A generation tree cannot be built for the requested frame count."""


class SamplingError(RateCascadeError, RuntimeError):
    """The ODE sampler produced a non-finite state."""

    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"{message} (step {step})")


class TrainingError(RateCascadeError, RuntimeError):
    """Training diverged or was given an inconsistent state."""


class FormatError(RateCascadeError, ValueError):
    """A binary file does not match the expected layout."""


class SchedulerError(RateCascadeError, AssertionError):
    """The worker pool violated a dependency edge."""
