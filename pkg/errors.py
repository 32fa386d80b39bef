"""
Exception hierarchy shared by every module, each class carrying its CLI exit code
"""

from typing import Optional


class CtrakError(Exception):
    """Base error for the attribution toolkit"""

    exit_code = 1


class InvalidArgumentError(CtrakError, ValueError):
    """Bad argument: dimension mismatch, unknown condition, malformed step list"""

    exit_code = 2


class ConfigError(CtrakError):
    """Config file could not be parsed or validated"""

    exit_code = 2


class InvalidStateError(CtrakError):
    """Operation called on an object that is not ready for it"""

    exit_code = 2


class FingerprintMismatchError(CtrakError):
    """Artifacts produced under different configurations were combined"""

    exit_code = 3

    def __init__(self, what: str, expected: str, found: str):
        super().__init__(f"{what}: fingerprint {found} does not match expected {expected}")
        self.expected = expected
        self.found = found


# Scoring-time name used by projection_store
ConfigurationError = FingerprintMismatchError


class NumericalError(CtrakError):
    """Non-finite values or a failed factorization"""

    exit_code = 4


class ScheduleError(NumericalError):
    """Noise schedule cannot support the requested operation"""


class TrainingFailureError(NumericalError):
    """Training loss became non-finite"""

    def __init__(self, message: str, iteration: Optional[int] = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class StorageError(CtrakError):
    """On-disk artifact is unreadable, truncated or fails its checksum"""

    exit_code = 4


class ConflictError(StorageError):
    """Record with the same sample_id already present"""


def require_finite(array, context: str) -> None:
    """Raise NumericalError when an array holds NaN or inf"""
    import numpy as np

    if not np.all(np.isfinite(array)):
        raise NumericalError(f"non-finite values in {context}")
