"""
Toolkit exceptions.
Every failure raised by the toolkit derives from ToolkitError so the command line
can map it to an exit code without inspecting messages.
"""

from typing import Iterable, List


class ToolkitError(Exception):
    """Base class for all toolkit errors"""


class InvalidArgumentError(ToolkitError, ValueError):
    """Bad parameter, geometry mismatch or empty input"""


class OutOfBoundsError(ToolkitError, IndexError):
    """Bounding box does not fit inside its host grid"""


class VolumeFormatError(ToolkitError):
    """Malformed or truncated volume / sidecar file"""


class UnsupportedFormatError(ToolkitError):
    """Volume outside the supported NIfTI subset"""


class ConsistencyError(ToolkitError):
    """Annotation grid and station sidecar disagree"""

    def __init__(self, message: str, offending: Iterable[int] = ()):
        self.offending: List[int] = sorted(int(v) for v in offending)
        if self.offending:
            message = f"{message}: {', '.join(str(v) for v in self.offending)}"
        super().__init__(message)


class NoLungFoundError(ToolkitError):
    """Empty lung mask or no lung-like component"""


class ManifestError(ToolkitError):
    """Manifest entry missing or pointing at a missing file"""

    def __init__(self, patient_id: str, role: str, detail: str = "missing"):
        self.patient_id = patient_id
        self.role = role
        super().__init__(f"patient '{patient_id}': {role} {detail}")


class SpecError(ToolkitError):
    """Invalid phantom specification"""


# Errors that the command line reports as I/O failures (exit code 2)
IO_ERRORS = (OSError, VolumeFormatError, UnsupportedFormatError, ManifestError)
