"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes, so new errors should subclass the
closest existing category rather than ``LaclError`` directly.
"""


class LaclError(Exception):
    """Base class for all package errors."""


class InvalidInputError(LaclError, ValueError):
    pass


class DegenerateVectorError(InvalidInputError):
    pass


class DivergenceUndefinedError(InvalidInputError):
    pass


class InvalidClassError(InvalidInputError):
    pass


class NormalizationError(InvalidInputError):
    pass


class ShapeMismatchError(InvalidInputError):
    pass


class InvalidConfigError(LaclError, ValueError):
    pass


class InvalidStateError(LaclError, RuntimeError):
    pass


class NoNegativesError(InvalidStateError):
    pass


class TrainingDivergedError(LaclError, ArithmeticError):
    def __init__(self, message: str, step: int | None = None) -> None:
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class FileFormatError(LaclError):
    """Bad magic, unsupported version, or inconsistent header."""


class TruncatedFileError(FileFormatError):
    pass
