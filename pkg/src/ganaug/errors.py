"""Exception hierarchy shared by all pipeline stages."""


class GanAugError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(GanAugError, ValueError):
    pass


class InfeasibleError(GanAugError):
    """Raised when rejection sampling runs out of attempts."""


class DomainError(GanAugError, ValueError):
    """A probability fell outside the open interval (0, 1)."""


class TrainingDivergedError(GanAugError, RuntimeError):
    pass


class ConfigError(GanAugError):
    pass


class CheckpointError(GanAugError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass
