"""Exception types shared across the package."""


class CCEError(Exception):
    """Base class for library errors."""


class CapacityError(CCEError):
    """A computation would exceed a configured size limit."""


class NumericalError(CCEError, FloatingPointError):
    """Non-finite values appeared during an iterative computation."""


class ParseError(CCEError, ValueError):
    """Malformed input text.  ``line`` is 1-based, or None at end of input."""

    def __init__(self, message, line=None):
        self.line = line
        where = f"line {line}: " if line is not None else "end of input: "
        super().__init__(where + message)


class DomainError(CCEError, ValueError):
    """Input values outside the model's domain (e.g. zero table entries)."""


class ConstructionError(CCEError, ValueError):
    """A structure could not be built from the given inputs."""


class PreconditionError(CCEError, ValueError):
    """An operation was called on inputs that violate its preconditions."""
