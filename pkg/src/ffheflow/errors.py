"""Exception hierarchy shared by the solvers and the CLI."""


class FFHEError(Exception):
    """Base class for all package errors."""


class CaseParseError(FFHEError, ValueError):
    """Malformed case file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CaseValidationError(FFHEError, ValueError):
    pass


class SingularElementError(FFHEError, ValueError):
    """An in-service branch has zero series impedance."""


class ConfigurationError(FFHEError, ValueError):
    """Inconsistent device configuration (modes, placement, limits)."""


class InvalidGermError(FFHEError, ZeroDivisionError):
    """A germ constant that must be nonzero is zero."""


class SingularSystemError(FFHEError, ArithmeticError):
    """The embedded linear system (or a Newton Jacobian) is singular.

    ``block`` names the first row block found to be dependent.
    """

    def __init__(self, message, block=None):
        self.block = block
        super().__init__(message)
