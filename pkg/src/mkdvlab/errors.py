"""Exception types shared across mkdvlab."""

from __future__ import annotations


class MkdvLabError(Exception):
    """Base class for all mkdvlab failures."""


class ConfigError(MkdvLabError, ValueError):
    """Raised when a run configuration file or flag combination is invalid."""


class FlowBlowUpError(MkdvLabError):
    """Raised when the time integrator produces a non-finite state."""

    def __init__(self, message: str, last_good_time: float) -> None:
        super().__init__(f"{message} (last good time {last_good_time:.6g})")
        self.last_good_time = last_good_time


class WickBudgetExceeded(MkdvLabError):
    """Raised when an exact Gaussian moment would exceed the enumeration budget."""


class FitError(MkdvLabError, ValueError):
    """Raised when a log-log or tail fit receives unusable data."""


class SingularSystemError(MkdvLabError, ValueError):
    """Raised when a polarization system is singular or badly conditioned."""
