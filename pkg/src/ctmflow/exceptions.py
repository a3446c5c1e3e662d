"""Exception types shared across the package.

The command line tool maps these onto exit codes: configuration and data
validation problems exit with 2, numeric failures with 3, and I/O errors
(plain ``OSError``) with 4.
"""


class ConfigError(ValueError):
    """A configuration file or option is malformed or inconsistent."""


class DataValidationError(ValueError):
    """Input data violates a documented requirement (schema, finiteness)."""


class DegenerateOutcomeError(DataValidationError):
    """The outcome has zero variance, so no transformation can be fit."""


class NumericGuardError(FloatingPointError):
    """A numeric guard tripped in strict mode (non-positive Jacobian)."""


class DivergenceError(RuntimeError):
    """The optimizer produced non-finite losses for several epochs in a row."""
