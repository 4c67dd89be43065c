"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes (config=2, data=3, training=4).
"""


class HybridRecError(Exception):
    """Base class for package errors."""


class ConfigError(HybridRecError):
    """Invalid or inconsistent configuration."""


class DataError(HybridRecError):
    """Malformed input data or violated data-level precondition."""


class InputDomainError(DataError):
    """A scalar argument is outside its documented domain."""


class IdRangeError(DataError):
    """A user or item index is outside the densified id space."""


class CatalogError(DataError):
    """An item id has no title in the catalog."""


class ShapeError(HybridRecError):
    """Vector or matrix dimensions do not match."""


class ContractError(HybridRecError):
    """An internal API contract was violated (e.g. unsubstituted slot token)."""


class AlignmentError(HybridRecError):
    """Two prediction sets do not cover the same (user, item) rows."""


class UndefinedMetricError(HybridRecError):
    """A metric is undefined on the given input (e.g. single-class AUC)."""


class TrainingError(HybridRecError):
    """Training diverged or otherwise failed; a checkpoint may be attached."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class StageError(HybridRecError):
    """A pipeline stage failed; carries the stage name for reporting."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
