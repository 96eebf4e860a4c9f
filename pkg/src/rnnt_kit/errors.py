"""Exception types shared across the toolkit.

The CLI maps these onto its exit-code contract: ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration file, key, or command-line option."""


class DataError(ValueError):
    """Malformed or missing data file (archive, vocab, transcript, wav)."""


class NumericalError(RuntimeError):
    """Non-finite loss or gradient encountered during optimization."""
