"""Exception hierarchy shared by the simulator, the oracle and the CLI."""

from __future__ import annotations


class HybridPDPError(Exception):
    """Base class for all package errors."""


class DimensionError(HybridPDPError, ValueError):
    """Operand shapes are incompatible."""


class PreconditionError(HybridPDPError, ValueError):
    """An input violates a documented precondition."""


class ValidationError(HybridPDPError, ValueError):
    """A model, state or configuration failed validation."""


class NumericalError(HybridPDPError, ArithmeticError):
    """Base class for failures of the numerical machinery."""


class SurvivalUnderflowError(NumericalError):
    """Survival probability fell below the representable floor."""


class ZeroRateError(NumericalError):
    """Jump rate is (numerically) zero, so no jump distribution exists."""


class InvalidJumpError(NumericalError):
    """The coupling operator annihilates the current state."""


class StiffnessError(NumericalError):
    """The adaptive integrator could not make progress."""


class InconsistentHistoryError(HybridPDPError, ValueError):
    """A recorded classical history is impossible under the model."""
