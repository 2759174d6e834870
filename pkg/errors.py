"""
Error types shared by the library, the CLI and the prediction service
"""
from typing import Optional

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3


class EnsegError(Exception):
    """Base error; carries a stable machine code and a process exit code"""

    code = "E_INTERNAL"
    exit_code = EXIT_RUNTIME

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        self.message = message
        if code:
            self.code = code

    def to_dict(self) -> dict:
        return {"error": self.code, "message": self.message}


# Input / configuration errors (exit 2)

class InputError(EnsegError):
    exit_code = EXIT_INPUT


class DatasetNotFoundError(InputError):
    code = "E_DATASET_NOT_FOUND"


class LayoutError(InputError):
    code = "E_LAYOUT"


class PairingError(InputError):
    code = "E_PAIRING"


class LabelRangeError(InputError):
    code = "E_LABEL_RANGE"

    def __init__(self, path, value: int, num_classes: int):
        super().__init__(f"{path}: mask value {value} outside class range 0..{num_classes - 1}")
        self.path = path
        self.value = value


class DecodeError(InputError):
    code = "E_DECODE"


class ZeroVarianceError(InputError):
    code = "E_ZERO_VARIANCE"


class SplitError(InputError):
    code = "E_SPLIT"


class ConfigError(InputError):
    code = "E_CONFIG"


class ShapeError(InputError):
    code = "E_SHAPE"


class CheckpointNotFoundError(InputError):
    code = "E_CHECKPOINT_NOT_FOUND"


class IncompatibleCheckpointError(InputError):
    code = "E_CHECKPOINT_INCOMPATIBLE"


class CorruptCheckpointError(InputError):
    code = "E_CHECKPOINT_CORRUPT"


class FusionShapeError(InputError):
    code = "E_FUSION_SHAPE"


class MetricShapeError(InputError):
    code = "E_METRIC_SHAPE"


class EmptyDatasetError(InputError):
    code = "E_EMPTY_DATASET"


class TableConsistencyError(InputError):
    code = "E_TABLE_CONSISTENCY"


class OutputDirError(InputError):
    code = "E_IO"


# Runtime errors (exit 3)

class DivergenceError(EnsegError):
    code = "E_DIVERGENCE"

    def __init__(self, epoch: int, batch: int, member: Optional[int] = None):
        where = f"epoch {epoch}, batch {batch}"
        if member is not None:
            where = f"member {member}, {where}"
        super().__init__(f"loss is not finite ({where})")
        self.epoch = epoch
        self.batch = batch
        self.member = member


class ResourceError(EnsegError):
    code = "E_RESOURCE"


class MemberForwardError(EnsegError):
    code = "E_MEMBER_FORWARD"

    def __init__(self, member: int, cause: Exception):
        super().__init__(f"member {member} forward pass failed: {cause}")
        self.member = member
        self.cause = cause
        if isinstance(cause, EnsegError):
            self.exit_code = cause.exit_code
