"""
Error hierarchy for the inversion laboratory.
Every failure kind raised by the package derives from InverterError.
"""


class InverterError(Exception):
    """Base class for all package errors."""


class DimensionError(InverterError, ValueError):
    """Shapes or template dimensions do not match."""


class RangeError(InverterError, ValueError):
    """Values fall outside their allowed range."""


class ArityError(InverterError, ValueError):
    """Wrong number of parts, layers or components."""


class CapabilityError(InverterError):
    """Operation requires a capability the extractor does not declare."""


class ExtractorStateError(InverterError):
    """Extractor used before it was initialized."""


class NumericError(InverterError, ArithmeticError):
    """Numerically undefined operation (e.g. zero-norm vector)."""


class DataError(InverterError):
    """Dataset does not satisfy the operation's preconditions."""


class StageOrderError(InverterError):
    """Training stages requested out of order."""


class CheckpointFormatError(InverterError):
    """Checkpoint file cannot be read or does not match the model."""

    def __init__(self, message: str, module: str = ""):
        super().__init__(f"{message} (module: {module})" if module else message)
        self.module = module


class DetectionFailure(InverterError):
    """Landmark detection or mask extraction failed for an image."""


class ConfigError(InverterError, ValueError):
    """Configuration does not validate against the schema."""

    def __init__(self, message: str, key: str = ""):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class AblationError(InverterError, ValueError):
    """Ablation flag combination is not one of the supported rows."""
