"""
Typed errors shared by every app.

``exit_status`` is what ``apps.runs.cli.cli_dispatch`` returns when the error
escapes a command: 3 for bad input, 1 for everything that fails at runtime.
"""


class MotionTransferError(Exception):
    """Base class for all pipeline errors."""
    exit_status = 1


class InvalidInputError(MotionTransferError):
    """The caller supplied something that fails validation."""
    exit_status = 3


# -- input validation -------------------------------------------------------

class ConfigValidationError(InvalidInputError):
    def __init__(self, errors):
        self.errors = errors
        super().__init__(f"Invalid configuration: {errors}")


class DatasetValidationError(InvalidInputError):
    """Raised with every violation found, not just the first."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("Dataset is invalid:\n  " + "\n  ".join(self.violations))


class DatasetEmptyError(InvalidInputError):
    pass


class DimensionMismatchError(InvalidInputError):
    pass


class ShapeError(InvalidInputError):
    pass


class TimestepError(InvalidInputError):
    pass


class VerbNotFoundError(InvalidInputError):
    pass


class MissingVerbIndexError(InvalidInputError):
    pass


class CheckpointVersionError(InvalidInputError):
    pass


class MissingCheckpointError(InvalidInputError):
    pass


class TrajectoryOutOfFrameError(InvalidInputError):
    pass


class ConditionLengthError(InvalidInputError):
    pass


# -- runtime ------------------------------------------------------------------

class PlacementError(MotionTransferError):
    pass


class AdapterAttachError(MotionTransferError):
    pass


class AdapterShapeConflictError(MotionTransferError):
    pass


class StageConfigError(MotionTransferError):
    pass


class RecaptionTimeoutError(MotionTransferError):
    def __init__(self, message, retries):
        self.retries = retries
        super().__init__(f"{message} (after {retries} retries)")


class RecaptionValidationError(MotionTransferError):
    pass


class RecaptionBudgetError(MotionTransferError):
    pass


class ProviderError(MotionTransferError):
    pass


class ProviderMismatchError(MotionTransferError):
    pass


class MissingInjectorBlockError(MotionTransferError):
    pass


class DoubleEnhancementError(MotionTransferError):
    pass


class EmptyInputError(MotionTransferError):
    pass
