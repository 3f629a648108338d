"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
RejectedInputError / DataFormatError -> 3, DivergenceError -> 4.
"""


class PulsebenchError(Exception):
    """Base class for all package-specific errors."""


class RejectedInputError(PulsebenchError):
    """Input data violates an operation's preconditions."""


class ConfigError(PulsebenchError):
    """Invalid or inconsistent configuration."""


class DataFormatError(PulsebenchError):
    """A serialized artifact (map file, checkpoint, CSV) is malformed."""


class NoPeakError(PulsebenchError):
    """No spectral peak exists in the requested band."""


class DivergenceError(PulsebenchError):
    """Training produced a non-finite loss or gradient."""
