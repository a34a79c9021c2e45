"""Exception hierarchy shared by every module."""


class HypballError(Exception):
    """Base class for toolkit errors."""


class UsageError(HypballError, ValueError):
    """Arguments are inconsistent (shape, curvature, mode)."""


class DomainError(HypballError, ValueError):
    """Input values fall outside the operation's domain (e.g. non-finite)."""


class DegenerateInputError(DomainError):
    """A removable singularity could not be avoided."""


class ProtocolError(HypballError):
    """Not enough samples (or modalities) for the requested computation."""


class SchemaError(HypballError, ValueError):
    """A dataset record violates the sample schema."""


class ParseError(SchemaError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TrainingError(HypballError, RuntimeError):
    """Training produced a non-finite value."""
