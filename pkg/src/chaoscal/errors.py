"""Exception hierarchy.

Two families matter downstream: bad inputs/config (ValidationError, CLI exit
code 2) and numerical failures (NumericError, CLI exit code 3).
"""


class ChaoscalError(Exception):
    pass


class ValidationError(ChaoscalError, ValueError):
    """Invalid argument, domain violation, or malformed input data."""


class ConfigError(ValidationError):
    """Inconsistent or unsupported configuration."""


class WeightingError(ValidationError):
    """A quote cannot carry a vega weight (degenerate vol or maturity)."""


class NumericError(ChaoscalError, ArithmeticError):
    """Numerical computation failed (non-finite values, no convergence)."""


class InversionError(NumericError):
    """Implied-vol inversion failed; message carries the diagnostics."""


class ExplosionError(NumericError):
    """ODE/series solution left the trusted domain (moment explosion)."""


class IntegrationError(NumericError):
    """Numerical integral failed to converge (tail or panel refinement)."""


class OptimizerError(NumericError):
    """Optimization step failed (non-finite gradient or diverged state)."""
