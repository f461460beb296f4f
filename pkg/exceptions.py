"""
Custom Exception Classes
Structured error handling for HeadEdit Lab
"""
from typing import Optional, Dict, Any, Sequence


class HeadEditException(Exception):
    """Base exception for HeadEdit Lab"""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.details = details or {}
        super().__init__(self.message)


class ConfigException(HeadEditException):
    """Invalid or inconsistent configuration"""
    pass


class InputException(HeadEditException):
    """Token sequences out of range or too long for the context"""
    pass


class ContractException(HeadEditException):
    """Violated operation precondition"""
    pass


class DimensionException(ContractException):
    """Tensor shapes do not conform"""

    def __init__(self, op: str, *shapes: Sequence[int]):
        shown = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}", {"op": op, "shapes": [list(s) for s in shapes]})


class TrainingException(HeadEditException):
    """Training diverged or produced a non-finite loss"""
    pass


class ArtifactIOException(HeadEditException):
    """Checkpoint, adapter or report file could not be read or written"""
    pass


# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_TRAINING = 2
EXIT_IO = 3


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    if isinstance(exc, TrainingException):
        return EXIT_TRAINING
    if isinstance(exc, (ArtifactIOException, OSError)):
        return EXIT_IO
    if isinstance(exc, (ConfigException, InputException, ContractException)):
        return EXIT_CONFIG
    return EXIT_CONFIG


def training_failure(message: str, trace: Sequence[float], **details: Any) -> TrainingException:
    """Build a TrainingException carrying the loss trace"""
    payload = {"trace": [float(x) for x in trace]}
    payload.update(details)
    return TrainingException(message, payload)
