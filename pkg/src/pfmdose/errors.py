"""Exception types shared across the package."""


class PFMError(Exception):
    """Base class for all package errors."""


class DimensionError(PFMError, ValueError):
    """Operand shapes do not agree."""


class ContractError(PFMError, ValueError):
    """A caller violated an operation's precondition."""


class NumericalError(PFMError, FloatingPointError):
    """A forward value became NaN or infinite."""


class GraphError(PFMError, RuntimeError):
    """The recorded computation graph is malformed."""


class FormatError(PFMError, ValueError):
    """A PFMT container is malformed. ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(PFMError, ValueError):
    """Invalid run configuration or missing inputs."""


class GenerationError(PFMError, RuntimeError):
    """Phantom geometry could not be placed."""


class UndefinedMetricError(PFMError, ValueError):
    """A dosimetric index is undefined for the given dose (e.g. zero denominator)."""
