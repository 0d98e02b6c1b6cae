"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes (see ``catflow.cli``).
"""


class CatflowError(Exception):
    pass


class ConfigError(CatflowError, ValueError):
    """Invalid configuration or argument combination."""


class DomainError(CatflowError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class DimensionError(DomainError):
    pass


class SingularTimeError(DomainError):
    """Evaluation at t = 1 where the drift / posterior is singular."""


class NumericError(CatflowError, ArithmeticError):
    """Non-finite values appeared during a computation."""


class EmptyLossError(CatflowError, ValueError):
    """Every position of a batch was masked out."""


class TeacherDomainError(NumericError):
    """ESD teacher log-argument was nonpositive."""


class CapacityError(CatflowError, ValueError):
    """Joint space too large to enumerate."""


class FormatError(CatflowError, IOError):
    """File does not follow the expected format."""


class CorruptionError(FormatError):
    """File is truncated or otherwise damaged."""


class DescriptorConflictError(CatflowError, ValueError):
    """Checkpoint backbone does not match the runtime configuration."""
