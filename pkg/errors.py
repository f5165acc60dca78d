# errors.py
"""
Structured errors. Every error carries the process exit code the CLI reports for it.
"""
from typing import Optional


class TapmError(Exception):
    exit_code = 1


class ConfigError(TapmError):
    exit_code = 1


class ShapeError(TapmError):
    exit_code = 1


class DataError(TapmError):
    exit_code = 2


class CheckpointError(TapmError):
    exit_code = 2


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointUnknownParameterError(CheckpointError):
    pass


class NumericError(TapmError):
    exit_code = 3

    def __init__(self, message: str, batch_index: Optional[int] = None):
        super().__init__(message)
        self.batch_index = batch_index
