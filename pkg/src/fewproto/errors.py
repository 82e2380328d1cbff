"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 1,
DataError (and subclasses) -> 2, NumericError -> 3.
"""


class FewprotoError(Exception):
    pass


class ConfigError(FewprotoError):
    """Invalid configuration: bad hyperparameters, mismatched dimensions."""


class DimensionError(ConfigError):
    """Shapes that cannot be combined; message names both shapes."""


class DataError(FewprotoError):
    """Bad data content: NaN embeddings, empty classes, missing files."""


class FormatError(DataError):
    """Malformed binary file (magic, version, truncation, hash mismatch)."""


class SamplingError(DataError):
    """Episode request the dataset cannot satisfy."""


class NumericError(FewprotoError):
    """Non-finite value where a finite one is required."""
