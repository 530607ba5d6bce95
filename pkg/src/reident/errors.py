"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid run configuration (bad flag combination, missing classes, ...)."""


class DataFormatError(Exception):
    """A data file exists but cannot be parsed or fails its schema."""


class DegenerateEmbeddingError(ValueError):
    """The pre-normalization vector is exactly zero; refusing to divide by zero."""
