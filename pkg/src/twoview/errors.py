"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TwoViewError(Exception):
    exit_code = 1


class ValidationError(TwoViewError, ValueError):
    exit_code = 4


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingFileError(TwoViewError, FileNotFoundError):
    exit_code = 3


class FormatError(TwoViewError):
    """Corrupt, truncated or wrong-version binary/JSON artifact."""

    exit_code = 4


class FingerprintMismatch(TwoViewError):
    exit_code = 5


class NoLeafDetected(TwoViewError):
    exit_code = 6


class TrainingDiverged(TwoViewError, FloatingPointError):
    exit_code = 6
