"""Exception hierarchy shared by all subpackages."""


class MTNPError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MTNPError, ValueError):
    pass


class ConfigError(MTNPError, ValueError):
    pass


class DomainError(MTNPError, ValueError):
    pass


class EmptyContextError(MTNPError, ValueError):
    pass


class CompletenessError(MTNPError, ValueError):
    """JTNP was given a context or target with missing labels."""


class StateError(MTNPError, RuntimeError):
    pass


class TaskError(MTNPError, KeyError):
    pass


class SizeError(MTNPError, ValueError):
    pass


class FormatError(MTNPError, ValueError):
    pass


class DataError(MTNPError, ValueError):
    pass


class ProtocolError(MTNPError, ValueError):
    pass


class ArtifactMismatch(MTNPError, ValueError):
    """A checkpoint does not match the requested model variant."""


class TrainingDiverged(MTNPError, FloatingPointError):
    """Loss or gradient became non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
