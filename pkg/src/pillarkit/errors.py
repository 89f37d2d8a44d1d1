"""Exception hierarchy shared across the package."""


class PillarkitError(Exception):
    """Base class for all library errors."""


class ValidationError(PillarkitError, ValueError):
    """An input, config, or invariant check failed."""


class FileFormatError(PillarkitError, ValueError):
    """A file does not conform to its declared binary/JSON layout."""


class NonFiniteError(ValidationError):
    """A NaN or Inf was encountered where finite values are required.

    Carries the flat index of the first offending element when known.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class TieError(PillarkitError, RuntimeError):
    """Gradient-check inputs could not be made tie-free within the retry budget."""


class DivergenceError(PillarkitError, RuntimeError):
    """Training produced a non-finite loss or gradient.

    ``step`` records the optimizer step at which divergence was detected.
    """

    def __init__(self, message: str, step: int = -1):
        super().__init__(message)
        self.step = step
