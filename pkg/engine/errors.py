"""
Exception hierarchy for the FCTSBN engine
The CLI maps each family to a process exit code
"""
from typing import Iterable, Optional


class FCTSBNError(Exception):
    """Base class for every engine error"""


class ShapeError(FCTSBNError, ValueError):
    """
    Dimension mismatch between arrays and the parameter layout
    """

    def __init__(self, message: str, axes: Iterable[str] = ()):
        self.axes = list(axes)
        if self.axes:
            message = f"{message} (axes: {', '.join(self.axes)})"
        super().__init__(message)


class ConfigError(FCTSBNError, ValueError):
    """
    Invalid run configuration; carries the dotted paths of the offending keys
    """

    def __init__(self, message: str, paths: Iterable[str] = ()):
        self.paths = list(paths)
        if self.paths:
            message = f"{message}: {', '.join(self.paths)}"
        super().__init__(message)


class DatasetError(FCTSBNError, IOError):
    """Dataset files that cannot be parsed or validated"""


class CheckpointError(FCTSBNError, IOError):
    """Checkpoint files that are truncated, inconsistent or incompatible"""


class NumericAbort(FCTSBNError, ArithmeticError):
    """
    Training stopped because the lower bound went non-finite
    """

    def __init__(self, message: str, dump_path: Optional[str] = None):
        self.dump_path = dump_path
        if dump_path:
            message = f"{message} (diagnostics written to {dump_path})"
        super().__init__(message)
