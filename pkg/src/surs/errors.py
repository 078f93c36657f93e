"""Exception types shared across the pipeline."""


class SursError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(SursError, ValueError):
    """Input violates a documented invariant or precondition."""


class FormatError(ValidationError):
    """A file could not be parsed."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class SamplingError(SursError):
    """Not enough candidate points on one side of a surface; regrow the pool."""


class DivergenceError(SursError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, param=None):
        self.param = param
        super().__init__(message)
