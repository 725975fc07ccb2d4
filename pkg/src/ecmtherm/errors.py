"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid static configuration (cell constants, tables, meshes)."""


class NumericError(ArithmeticError):
    """A computation received or produced non-finite values."""


class TraceParseError(ValueError):
    """A tabular trace could not be parsed.

    ``line`` is the 1-based line number in the source stream, when known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FitError(RuntimeError):
    """A fit could not be set up or solved (rank deficiency, bad start point)."""


class SetupError(RuntimeError):
    """A field solve is ill-posed, e.g. a potential without any reference."""


class SolverError(RuntimeError):
    """A linear solve failed to reach the requested residual."""
