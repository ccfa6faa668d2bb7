"""Exception types raised across the package."""


class EncoreBenchError(Exception):
    """Base class; the CLI reports these as one-line errors."""


class ZeroArea(EncoreBenchError, ValueError):
    pass


class NoVisibleBoxes(EncoreBenchError, ValueError):
    pass


class InvalidBox(EncoreBenchError, ValueError):
    pass


class ParseError(EncoreBenchError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(ParseError):
    pass


class GapError(ParseError):
    pass


class ProjectionError(EncoreBenchError, ValueError):
    pass


class TieError(EncoreBenchError, ValueError):
    pass


class LabelError(EncoreBenchError):
    """Labeling failure for one sample, with its identity attached."""

    def __init__(self, sample_id: str, cause: Exception):
        self.sample_id = sample_id
        self.cause = cause
        super().__init__(f"sample {sample_id}: {type(cause).__name__}: {cause}")


class EmptyFactors(EncoreBenchError, ValueError):
    pass


class LengthMismatch(EncoreBenchError, ValueError):
    pass


class EmptyCell(EncoreBenchError, ValueError):
    pass


class ShapeMismatch(EncoreBenchError, ValueError):
    pass


class NotScalar(EncoreBenchError, ValueError):
    pass


class DetachedNode(EncoreBenchError, ValueError):
    pass


class MissingGrad(EncoreBenchError, ValueError):
    pass


class MissingFuture(EncoreBenchError, ValueError):
    pass


class DisabledBranch(EncoreBenchError, RuntimeError):
    pass


class TooFewModalities(EncoreBenchError, ValueError):
    pass


class BadCheckpoint(EncoreBenchError, ValueError):
    pass


class EmptyCorpus(EncoreBenchError, ValueError):
    pass


class ConfigError(EncoreBenchError, ValueError):
    pass
