"""Exceptions raised throughout deqmd. Every error the library raises on purpose derives from
:py:class:`DeqMdError`, so callers (such as the command line) can catch the family at once."""


class DeqMdError(Exception):
    """Root of all library errors."""


class CorruptDataError(DeqMdError, ValueError):
    """Raised when an image holds NaN or infinite pixels."""


class DomainError(DeqMdError, ValueError):
    """Raised when an argument lies outside the domain of the function being evaluated, for example a non-positive
    pixel handed to Burg's entropy."""


class StepInfeasibleError(DomainError):
    """Raised by a mirror step whose pre-projection mirror point leaves the domain of the inverse mirror map. The
    backtracking search treats this as a failed decrease test."""


class ShapeMismatchError(DeqMdError, ValueError):
    """Raised when two images, or an image and an operator, disagree on shape."""


class BacktrackingError(DeqMdError, RuntimeError):
    """Raised when the step-size search hits its shrink limit. Termination is guaranteed in exact arithmetic, so
    this usually signals an inconsistent gradient."""


class LayoutMismatchError(DeqMdError, ValueError):
    """Raised when a parameter vector does not fit the network it is loaded into."""


class StaleTapeError(DeqMdError, RuntimeError):
    """Raised when a :py:class:`deqmd.regularizers.Tape` is replayed a second time."""


class ImageFormatError(DeqMdError, ValueError):
    """Raised for unsupported or corrupt image, kernel and checkpoint files."""


class EmptyStreamError(DeqMdError, ValueError):
    """Raised when a selection is asked of an empty sequence of candidates."""


class ConfigError(DeqMdError, ValueError):
    """Raised for invalid experiment configuration.

    :param message: Description of the problem.
    :type message: str

    :param line: 1-based line number in the configuration file, when known. Defaults to None.
    :type line: int, optional
    """

    def __init__(self, message: str, line: int = None):
        self.line = line
        if line is not None:
            message = f'line {line}: {message}'
        super().__init__(message)
