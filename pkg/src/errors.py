"""
Error types for Fair Translate
Every error carries the process exit code the command line reports for it
"""
from typing import Any, Optional


class FairTranslateError(Exception):
    """Base class for all toolkit errors"""

    exit_code = 1


class ConfigError(FairTranslateError, ValueError):
    """Invalid configuration or spec field"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataFormatError(FairTranslateError, ValueError):
    """Malformed annotation table"""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ImageSizeError(FairTranslateError, ValueError):
    """Image too small for the requested crop"""


class ShapeError(FairTranslateError, ValueError):
    """Tensor shape, resolution or latent role mismatch"""


class CheckpointError(FairTranslateError):
    """Missing, mistyped or incompatible checkpoint"""


class PacNotTrainedError(FairTranslateError):
    """Features requested from a PAC that was never trained"""


class MissingLayerError(FairTranslateError, KeyError):
    """Perceptual embedder does not expose a requested layer"""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ''


class FairnessMetricError(FairTranslateError, ValueError):
    """A group lacks the samples a rate needs"""


class MetricInputError(FairTranslateError, ValueError):
    """Metric inputs with mismatched dimensions, too few samples or non-finite values"""


class NonFiniteLossError(FairTranslateError, FloatingPointError):
    """A loss term became NaN or infinite"""

    exit_code = 2

    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"non-finite value {value} in loss term '{term}'")


class TrainingDivergedError(FairTranslateError):
    """Training aborted on a non-finite loss"""

    exit_code = 2

    def __init__(self, message: str, last_report: Any = None, step: Optional[int] = None):
        self.last_report = last_report
        self.step = step
        super().__init__(message)


class ReportSchemaError(FairTranslateError, ValueError):
    """A report document does not match its shipped JSON schema"""
