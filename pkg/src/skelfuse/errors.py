"""Exception taxonomy shared by every module.

The CLI maps these onto process exit codes: UsageError (and subclasses)
exit 1, DataError (and subclasses) exit 2, NumericError exit 3.
"""


class SkelfuseError(Exception):
    pass


class UsageError(SkelfuseError):
    """Caller violated a precondition (bad argument, bad config key, ...)."""


class ShapeError(UsageError):
    """Operand shapes incompatible; carries both shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, self.shapes))}")


class NumericError(SkelfuseError):
    """A computation produced NaN/Inf or left the valid domain."""


class DataError(SkelfuseError):
    """Input data violates its contract (empty split, bad template, ...)."""


class ParseError(DataError):
    """Malformed text file; carries the 1-based line number."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class FileError(DataError):
    """Missing or unreadable file."""


class CorruptFileError(FileError):
    """Checkpoint failed its magic or checksum verification."""


class VersionError(FileError):
    """Checkpoint format version is not supported."""
