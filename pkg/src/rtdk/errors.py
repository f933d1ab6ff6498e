"""Exception types shared across the package."""


class RtdkError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(RtdkError, ValueError):
    """Tensor/vector dimensions do not match the operation's contract."""


class InvalidMaskError(RtdkError, ValueError):
    """An attention mask row allows no keys."""


class EmptyInputError(RtdkError, ValueError):
    """An operation requiring a non-empty sequence received an empty one."""


class EmptyContextError(RtdkError, ValueError):
    """Decoder invoked with an empty context sequence."""


class InvalidDomainError(RtdkError, ValueError):
    """Degenerate or unsupported optimization domain."""


class RequiresContextError(RtdkError, ValueError):
    """Conditional embedding requested without any observed data."""


class DegenerateEmbeddingError(RtdkError, ValueError):
    """Self-kernel of an embedded point is not strictly positive."""


class DegenerateDensityError(RtdkError, ValueError):
    """Predictive density requested with a zero variance."""


class NumericalFailureError(RtdkError, RuntimeError):
    """Cholesky factorization failed after all jitter escalations."""


class TrainingDivergenceError(RtdkError, RuntimeError):
    """A training step produced a non-finite loss; the step was rejected."""


class TooShortError(RtdkError, ValueError):
    """Trajectory too short for the requested split."""


class DomainViolationError(RtdkError, ValueError):
    """Action outside the objective's domain."""


class InvalidStoreError(RtdkError, ValueError):
    """Attempt to store an incomplete trajectory in the replay buffer."""


class EmptyBufferError(RtdkError, ValueError):
    """Replay sample requested from an empty buffer."""


class InvalidSliceError(RtdkError, ValueError):
    """Requested slice dimension exceeds the base problem dimension."""


class InvalidDimensionError(RtdkError, ValueError):
    """Objective evaluated at an unsupported dimensionality."""


class NotACandidateError(RtdkError, ValueError):
    """Lookup of a point absent from a discrete candidate table."""


class FormatError(RtdkError, ValueError):
    """Malformed external file (CSV candidate table, config, ...)."""


class CheckpointError(RtdkError, ValueError):
    """Checkpoint file is malformed or inconsistent with the model config."""


class ConfigError(RtdkError, ValueError):
    """Invalid experiment or module configuration."""


class BudgetExceededError(RtdkError, RuntimeError):
    """An objective evaluation would exceed the configured sample budget."""


class NothingToReportError(RtdkError, ValueError):
    """Report requested over an empty record set."""
