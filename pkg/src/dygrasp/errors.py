"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DyGraspError(Exception):
    exit_code = 1


class ConfigError(DyGraspError):
    exit_code = 3


class DataFormatError(DyGraspError):
    exit_code = 3


class StaleCacheError(DyGraspError):
    exit_code = 4


class MissingCacheError(DyGraspError):
    exit_code = 5


class BackendError(DyGraspError):
    exit_code = 6


class TransientBackendError(BackendError):
    """Retryable failure (transport error, 5xx, timeout)."""


class ContextOverflowError(BackendError):
    def __init__(self, message: str, limit: int):
        super().__init__(message)
        self.limit = limit


class CapabilityError(BackendError):
    """Backend lacks hidden-state or generation support."""


class ExtractionAborted(DyGraspError):
    """Reasoning stage gave up after its retry budget; caches stay valid."""

    exit_code = 7

    def __init__(self, message: str, pending: list):
        super().__init__(message)
        self.pending = pending


class TrainingDiverged(DyGraspError):
    exit_code = 8
