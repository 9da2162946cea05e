"""Exception hierarchy shared by the pipeline stages."""


class MCPadError(Exception):
    """Base class for all errors raised by mcpad."""


class DimensionMismatchError(MCPadError, ValueError):
    """Planes that must be synchronized have different shapes."""


class InvalidBoxError(MCPadError, ValueError):
    """A box has a non-positive side."""


class DegenerateAnchorError(MCPadError, ValueError):
    """An anchor has no pixel support inside the image."""


class UnlearnableDatasetError(MCPadError, ValueError):
    """Training data yields no positive anchor."""


class UndefinedMetricError(MCPadError, ValueError):
    """A rate was requested over an empty population."""

    def __init__(self, metric: str, reason: str):
        super().__init__(f"{metric} is undefined: {reason}")
        self.metric = metric


class CorruptFileError(MCPadError, ValueError):
    """A persisted frame, model or score file cannot be decoded."""

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path


class ConfigError(MCPadError, ValueError):
    """Run configuration is malformed or out of range."""


class DataLayoutError(MCPadError, ValueError):
    """A data directory is missing a manifest, split or frame."""
