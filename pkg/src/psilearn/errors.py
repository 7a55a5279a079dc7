"""Exception types shared across the library.

CLI exit-code mapping: InvariantViolation -> 1, ConfigError -> 2.
"""


class PsilearnError(Exception):
    """Base class for library errors."""


class ConfigError(PsilearnError):
    """A config file or constructor argument violates the documented schema."""


class InvariantViolation(PsilearnError):
    """A mathematical invariant that should hold by construction was violated.

    Raising this signals an implementation bug, not bad user input.
    """


class SupportViolation(PsilearnError):
    """A controlled policy puts mass where the prior policy has none."""

    def __init__(self, t, x, u, message=None):
        self.t, self.x, self.u = t, x, u
        super().__init__(message or f"support violation at (t={t}, x={x}, u={u})")


class NonConvergenceError(PsilearnError):
    """An iterative evaluation or solver hit its cap without converging."""


class NotPositiveDefinite(PsilearnError):
    """A matrix required to be positive definite is not."""
