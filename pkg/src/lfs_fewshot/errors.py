"""Exception types shared across the package."""


class LFSError(Exception):
    """Base class for all package errors."""


class DimensionError(LFSError, ValueError):
    pass


class DegenerateMaskError(LFSError, ValueError):
    """A mask row retains no entries, so softmax over it is undefined."""


class NonFiniteError(LFSError, FloatingPointError):
    pass


class TrainingDivergenceError(LFSError, RuntimeError):
    pass


class SingularityError(LFSError, ValueError):
    pass


class ManifestError(LFSError, ValueError):
    pass


class SamplingError(LFSError, ValueError):
    pass


class CheckpointError(LFSError, ValueError):
    """Checkpoint is malformed or does not match the model it is loaded into."""


class ConfigError(LFSError, ValueError):
    pass
