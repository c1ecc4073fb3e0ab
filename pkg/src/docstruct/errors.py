"""Exception types shared across the package."""


class DocstructError(Exception):
    """Base class for all package errors."""


class DimensionError(DocstructError, ValueError):
    """Operand shapes are inconsistent with the operation."""


class ContractError(DocstructError, ValueError):
    """A call violated an operation's preconditions."""


class NumericError(DocstructError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class LoadError(DocstructError, ValueError):
    """A dataset or checkpoint could not be parsed/validated."""


class GenerationError(DocstructError, RuntimeError):
    """Synthetic document generation could not satisfy its constraints."""
