"""Exception types shared across the simulator.

Exit-code mapping lives in the CLI: ConfigError -> 1, NumericalError -> 2.
"""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


class IntegrityError(RuntimeError):
    """Internal state violates a structural contract (missing buffer, bad schedule)."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or overflowed."""
