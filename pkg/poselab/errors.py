"""Exception hierarchy shared by every PoseLab module.

Library code raises these; only the command-line entry point turns them into
exit codes (1 usage, 2 data, 3 numerical).
"""


class PoseLabError(Exception):
    """Base class for all PoseLab errors."""

    exit_code = 1


class UsageError(PoseLabError):
    """Bad command-line usage."""

    exit_code = 1


class ConfigError(UsageError):
    """A configuration file or object violates its schema."""


class DataError(PoseLabError):
    """Input data is missing, empty or inconsistent."""

    exit_code = 2


class ParseError(DataError):
    """A data file could not be parsed."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class MissingField(ParseError):
    """A required key is absent from a data file."""

    def __init__(self, key: str, path: str | None = None, line: int | None = None):
        self.key = key
        super().__init__(f"missing field '{key}'", path=path, line=line)


class MissingClass(DataError):
    """No codebook entries exist for the queried object class."""


class EmptyCrop(DataError):
    """The crop square does not intersect the scene image."""


class EmptyModel(DataError):
    """An object model has no vertices."""


class CheckpointMismatch(DataError):
    """Head weights were trained on a different CVAE checkpoint."""


class NumericalError(PoseLabError):
    """A numerical computation produced an unusable result."""

    exit_code = 3


class DegenerateInput(NumericalError):
    """Gram-Schmidt input vectors are zero or parallel."""


class InvalidDistance(NumericalError):
    """A projective distance is not strictly positive."""


class BehindCamera(NumericalError):
    """A point lies on or behind the camera plane."""


class ShapeMismatch(NumericalError):
    """A tensor or vector does not have the expected shape."""


class EmptyInput(DataError):
    """An aggregation received no values."""
