"""Exceptions raised by eefwq."""

from typing import Optional


class ConfigError(ValueError):
    """Configuration file is malformed or misses a required field."""


class InvalidBitWidthError(ValueError):
    """Bit-width outside the supported range."""


class OutOfRangeError(ValueError):
    """Value lies outside the quantizer range [-s, s]."""


class InvalidScaleError(ValueError):
    """Quantizer scale is not strictly positive."""


class InvalidInputError(ValueError):
    """Input vector is empty or contains non-finite entries."""


class InvalidMultiplierError(ValueError):
    """Lagrange multiplier leads to a non-positive stationarity parameter."""


class ZeroRateError(ValueError):
    """Device has no usable channel (zero gain)."""


class UnderdeterminedFitError(ValueError):
    """Not enough distinct settings to fit the convergence coefficients."""


class PartitionError(ValueError):
    """Dataset cannot be partitioned as requested."""


class DimensionMismatchError(ValueError):
    """Weight vectors of different shapes cannot be aggregated."""


class InfeasibleError(RuntimeError):
    """
    No allocation satisfies the constraints.

    Attributes:
        constraint: Name of the first violated constraint.
    """

    constraint = "unknown"

    def __init__(self, message: str, constraint: Optional[str] = None):
        super().__init__(message)
        if constraint is not None:
            self.constraint = constraint


class DeadlineInfeasibleError(InfeasibleError):
    constraint = "deadline"


class BandwidthInfeasibleError(InfeasibleError):
    constraint = "bandwidth"


class QuantizationErrorInfeasibleError(InfeasibleError):
    constraint = "quant_error"


class MemoryInfeasibleError(InfeasibleError):
    constraint = "memory"


class ConvergenceInfeasibleError(InfeasibleError):
    constraint = "convergence"


class DivergenceError(RuntimeError):
    """Training loss became non-finite or exploded."""

    def __init__(self, message: str, round_index: int):
        super().__init__(message)
        self.round_index = round_index
