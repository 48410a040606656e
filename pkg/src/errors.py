# src/errors.py
#
# Error types shared by every stage. Each carries a short machine-readable code and the
# process exit status the CLI reports for it:
#   0 ok, 2 config error, 3 data error, 4 numeric failure, 5 I/O.


class TexhashError(Exception):
    """Base class; subclasses set `code` and `exit_code`."""

    code = "TEXHASH_ERROR"
    exit_code = 1


class ConfigError(TexhashError, ValueError):
    code = "CONFIG_ERROR"
    exit_code = 2


class DataError(TexhashError, ValueError):
    code = "DATA_ERROR"
    exit_code = 3


class NumericError(TexhashError, ArithmeticError):
    """Training diverged or a solve failed."""

    code = "NUMERIC_ERROR"
    exit_code = 4

    def __init__(self, message, step=None, last_finite=None):
        super().__init__(message)
        self.step = step
        self.last_finite = dict(last_finite or {})


class StorageError(TexhashError, OSError):
    code = "IO_ERROR"
    exit_code = 5


class ImageFormatError(DataError):
    """Malformed PPM/PGM header or payload; `offset` is the byte position of the problem."""

    code = "IMAGE_FORMAT_ERROR"

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointFormatError(DataError):
    code = "CHECKPOINT_FORMAT_ERROR"


class IndexFormatError(DataError):
    code = "INDEX_FORMAT_ERROR"

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset
