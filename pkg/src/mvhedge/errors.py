"""Exception types shared across the package."""


class MvhError(Exception):
    """Base class for all package errors."""


class LatticeSizeError(MvhError):
    """Requested tree depth exceeds the hard memory cap."""


class ShapeError(MvhError, ValueError):
    """Field dimensions do not match the lattice."""


class ConditionError(MvhError, ValueError):
    """Model violates the strict information gap rho**2 < 1 (or sigma <= 0)."""


class CapabilityError(MvhError, ValueError):
    """Payoff class outside the supported families.

    General terminal claims would require Malliavin-derivative machinery for
    their conditional integrands; only constant claims, functions of the
    observed terminal value and functions of the hidden terminal value are
    supported.
    """


class SolverError(MvhError, RuntimeError):
    """Iterative solver failed to reach its tolerance."""

    def __init__(self, message, residual_history=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])


class NewtonError(SolverError):
    """Per-node or per-step Newton iteration failed to converge."""


class InvariantViolation(MvhError, RuntimeError):
    """A solution left the region the theory guarantees (e.g. u <= 0)."""


class ExtrapolationError(MvhError, ValueError):
    """A path left the solved grid; widen the spatial domain."""


class ResourceError(MvhError, ValueError):
    """Requested simulation size exceeds the configured budget."""


class ConfigError(MvhError, ValueError):
    """Run configuration failed validation; message carries the field path."""
