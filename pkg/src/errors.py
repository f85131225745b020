"""Error hierarchy shared by every stage.

Each class carries the process exit code the CLI reports for it:
1 = usage/config, 2 = parse/input data, 3 = adapter, 4 = internal.
"""
from __future__ import annotations

from enum import Enum
from typing import Optional


class MvlabelError(Exception):
    """Base class for all toolkit errors."""
    exit_code = 4


class UsageError(MvlabelError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class PreconditionError(UsageError):
    """Raised before any work starts when a plan or request is inconsistent."""
    pass


class MissingComponentError(UsageError):
    pass


class InvalidKernelSpecError(UsageError):
    pass


class InvalidRatiosError(UsageError):
    pass


class ParseError(MvlabelError):
    """Malformed input file, with location context when known."""
    exit_code = 2

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{where}{message}")
        self.detail = message


class DuplicateFrameError(ParseError):
    pass


class DuplicateDetectionError(ParseError):
    pass


class UnitError(ParseError):
    pass


class RasterFormatError(ParseError):
    pass


class FrameMismatchError(ParseError):
    def __init__(self, missing_detections: list[str], missing_annotations: list[str]):
        self.missing_detections = missing_detections
        self.missing_annotations = missing_annotations
        parts = []
        if missing_detections:
            parts.append(f"no detections for frames {missing_detections}")
        if missing_annotations:
            parts.append(f"no annotations for frames {missing_annotations}")
        super().__init__("; ".join(parts))


class OutOfBoundsError(MvlabelError):
    exit_code = 2

    def __init__(self, message: str, offending: Optional[list] = None):
        self.offending = offending or []
        super().__init__(message)


class BehindCameraError(MvlabelError):
    exit_code = 2


class EvaluationError(MvlabelError):
    exit_code = 2


class InfeasibleSceneError(MvlabelError):
    exit_code = 1


class FailureReason(str, Enum):
    EXIT_CODE = "exit_code"
    TIMEOUT = "timeout"
    MALFORMED_OUTPUT = "malformed_output"
    LAUNCH = "launch"


class AdapterFailure(MvlabelError):
    """An external detector/trainer process did not deliver."""
    exit_code = 3

    def __init__(
        self,
        adapter_id: str,
        reason: FailureReason,
        message: str,
        returncode: Optional[int] = None,
        diagnostics: str = "",
    ):
        self.adapter_id = adapter_id
        self.reason = reason
        self.returncode = returncode
        self.diagnostics = diagnostics
        super().__init__(f"adapter '{adapter_id}' failed ({reason.value}): {message}")


class CoverageError(AdapterFailure):
    def __init__(self, adapter_id: str, missing: list[str]):
        self.missing = missing
        super().__init__(
            adapter_id,
            FailureReason.MALFORMED_OUTPUT,
            f"output omits {len(missing)} frame(s): {missing[:10]}",
        )
