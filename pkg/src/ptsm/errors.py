"""Exception types shared across the package."""


class PtsmError(Exception):
    """Base class for all errors raised by ptsm."""


class ContractError(PtsmError, ValueError):
    """A precondition of an operation was violated (bad shape, empty split, ...)."""


class GradCheckError(PtsmError):
    """The function under gradient check produced a non-finite value."""


class NonFiniteLossError(PtsmError, FloatingPointError):
    """A loss term evaluated to NaN or Inf."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value!r})")
        self.term = term
        self.value = value


class DatasetError(PtsmError):
    """Base class for EEGD dataset load failures."""


class DatasetFormatError(DatasetError):
    """Bad magic, unsupported version or inconsistent header."""


class DatasetTruncatedError(DatasetError):
    """The file ends before the payload declared by its header."""


class ChecksumMismatchError(DatasetError):
    """The CRC32 trailer does not match the file contents."""


class CheckpointError(PtsmError):
    """A checkpoint file is malformed or does not match the model config."""


class ConfigError(PtsmError, ValueError):
    """A configuration file has unknown keys or invalid values."""


class ArtifactError(PtsmError, OSError):
    """An output artifact could not be written; the message names the path."""
