"""Exception hierarchy shared across the package."""


class PolyembError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PolyembError, ValueError):
    """Operands have incompatible or invalid dimensions."""


class DomainError(PolyembError, ValueError):
    """Input is outside an operation's mathematical domain."""


class NonFiniteError(PolyembError, FloatingPointError):
    """A value that must be finite is NaN or infinite."""


class ConfigError(PolyembError, ValueError):
    """A configuration document or field is invalid."""


class EmptyInstanceError(PolyembError, ValueError):
    """An instance arrived with no local feature rows."""


class FeatureFileError(PolyembError, ValueError):
    """A feature container failed to parse.

    Carries the byte offset where parsing stopped and, when known, the
    index of the record being read.
    """

    def __init__(self, message, offset, record=None):
        detail = f"{message} (byte offset {offset}"
        if record is not None:
            detail += f", record {record}"
        detail += ")"
        super().__init__(detail)
        self.offset = offset
        self.record = record


class TrainingError(PolyembError, RuntimeError):
    """Training could not proceed (bad split, divergence, bad gradient)."""


class NonFiniteGradientError(TrainingError):
    """A gradient became NaN/Inf; carries the parameter name and step."""

    def __init__(self, name, step):
        super().__init__(f"non-finite gradient for parameter {name!r} at step {step}")
        self.name = name
        self.step = step


class RetrievalError(PolyembError, ValueError):
    """Retrieval query or evaluation could not be carried out."""


class MissingGroundTruthError(RetrievalError):
    """Some queries reference ground-truth ids absent from the index."""

    def __init__(self, missing):
        self.missing = list(missing)
        preview = ", ".join(
            f"query {qi}: {gt!r}" for qi, gt in self.missing[:5]
        )
        more = "" if len(self.missing) <= 5 else f" (+{len(self.missing) - 5} more)"
        super().__init__(f"ground-truth ids missing from index: {preview}{more}")
