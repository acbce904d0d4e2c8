"""Exception taxonomy shared by every module.

The CLI maps these onto process exit codes: ConfigError -> 2,
NumericError -> 3, ContractError -> 4.
"""


class AuroraError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AuroraError):
    """Invalid configuration value or malformed config/input file."""


class NumericError(AuroraError):
    """Non-finite value or numerically impossible request."""


class ContractError(AuroraError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Shape mismatch between operands; message names both shapes."""
