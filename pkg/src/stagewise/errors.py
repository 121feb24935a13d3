"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor/layer dimension mismatch."""


class ValidationError(ValueError):
    """Invalid argument value (labels out of range, bad kind, ...)."""


class DegenerateBatchError(ValidationError):
    """Batch too small for the requested operation (batchnorm training)."""


class StateError(RuntimeError):
    """Operation called in an invalid state (e.g. backward on a spent tape)."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient came out NaN/Inf; the run must abort."""


class EmptyBufferError(LookupError):
    """Read from an empty replay buffer (recoverable: scheduler stalls)."""


class ConfigError(ValueError):
    """Experiment config rejected; message names the offending field."""


class IdxFormatError(ValueError):
    """Malformed IDX image/label file."""
