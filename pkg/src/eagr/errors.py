"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class DomainError(ArithmeticError):
    """A value left the domain of an operation (non-finite result, log of <= 0)."""


class ParseError(ValueError):
    """Malformed file content. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
