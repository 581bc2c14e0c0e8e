"""Exception hierarchy shared by every engine module.

The CLI maps these onto exit codes: ConfigError -> 1, tensor/file IO
errors -> 2, numeric validation (including shape) errors -> 3.
"""


class EngineError(Exception):
    """Base class for all engine errors."""


class ShapeError(EngineError):
    """Operands have incompatible or illegal dimensions."""


class ValidationError(EngineError):
    """A numeric contract was violated (non-finite, non-stochastic, ...)."""


class DegenerateRowError(ValidationError):
    """A softmax row has no unsuppressed entry."""


class DegenerateVectorError(ValidationError):
    """A cosine operand row has zero norm."""


class MetricUndefinedError(ValidationError):
    """A metric was requested on inputs where it is not defined (e.g. L < 2)."""


class ConfigError(EngineError):
    """A run configuration is malformed or inconsistent."""


class TensorFormatError(EngineError):
    """Base class for tensor-file problems; subclasses are the error codes."""


class BadMagicError(TensorFormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(TensorFormatError):
    """File declares an unsupported format version."""


class TruncatedPayloadError(TensorFormatError):
    """Header or payload ends before the declared length."""


class NonFiniteValueError(TensorFormatError):
    """Payload contains NaN or infinity."""
