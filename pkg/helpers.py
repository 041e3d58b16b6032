# helpers.py
import logging
import sys

import numpy as np

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class CodeMergeError(Exception):
    """Base for every error the CLI maps to an exit code."""
    exit_code = 1


class StorageError(CodeMergeError):
    exit_code = 2

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{message} ({path})" if path is not None else message)


class FormatError(CodeMergeError):
    exit_code = 2

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(message)


class ParameterError(CodeMergeError):
    exit_code = 3


class StructuralError(ParameterError):
    def __init__(self, message, parameter=None):
        self.parameter = parameter
        super().__init__(message)


class ConfigError(ParameterError):
    pass


class StateError(CodeMergeError):
    exit_code = 3


class NumericalError(CodeMergeError):
    exit_code = 3


class MissingReferenceError(CodeMergeError):
    exit_code = 4

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(message)


class ToleranceError(CodeMergeError):
    exit_code = 5


def setup_logging(level="INFO"):
    # Results go to stdout, so diagnostics must stay on stderr.
    root = logging.getLogger()
    for old in [h for h in root.handlers if getattr(h, "_codemerge", False)]:
        root.removeHandler(old)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._codemerge = True
    root.addHandler(handler)
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))


def make_rng(seed, *stream):
    """Independent numpy generator for (seed, stream...) so sub-streams never overlap."""
    if seed < 0:
        raise ParameterError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])


def require_finite(values, what):
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{what} contains non-finite values")
    return arr
