"""
Exception hierarchy for the anticipation toolkit
Each error class carries the process exit code run.py reports for it
"""

from typing import Iterable, List, Optional


class AVTError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 3


class ValidationError(AVTError):
    """Bad configuration value, missing field or refused operation"""
    exit_code = 2


class ConfigurationError(ValidationError):
    """Components configured with incompatible dimensions or modes"""


class UnsupportedModeError(ValidationError):
    """Operation requested in a mode that cannot provide it"""


class ShapeError(AVTError, ValueError):
    """Operand shapes do not agree"""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        rendered = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class ClassIndexError(AVTError, IndexError):
    """Class index outside [0, K)"""


class FormatError(AVTError):
    """Corrupt or truncated binary/CSV file"""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class VocabularyError(AVTError):
    """Action vocabulary is incomplete or does not match"""


class AlignmentError(AVTError):
    """Prediction sets do not cover the same samples"""

    def __init__(self, message: str, offenders: Iterable[str] = ()):
        self.offenders: List[str] = sorted(offenders)
        if self.offenders:
            shown = ", ".join(self.offenders[:20])
            more = f" (+{len(self.offenders) - 20} more)" if len(self.offenders) > 20 else ""
            message = f"{message}: {shown}{more}"
        super().__init__(message)


class NumericalError(AVTError):
    """Non-finite values during optimization"""
    exit_code = 4
