"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 1, DataError and
CheckpointError -> 2, NumericalError -> 3.
"""


class CxrError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CxrError):
    """Malformed configuration file or invalid option combination."""


class DataError(CxrError):
    """Dataset layout, decoding, or split problems."""


class CheckpointError(CxrError):
    """Corrupt, incompatible, or incomplete checkpoint files."""


class NumericalError(CxrError):
    """Non-finite losses or gradients during training."""
