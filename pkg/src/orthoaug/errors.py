"""Exception types shared across the package."""


class OrthoaugError(Exception):
    """Base class for all package errors."""


class InvalidInputError(OrthoaugError):
    """Arguments violate a documented precondition (shape, finiteness, range)."""


class NumericalError(OrthoaugError):
    """A numerical routine failed to converge or produced non-finite values."""


class InsufficientDataError(OrthoaugError):
    """Not enough samples to perform the requested operation."""


class DegenerateChannelError(OrthoaugError):
    """A data channel has zero variance or zero power where that is not allowed."""

    def __init__(self, message, channel=None):
        super().__init__(message)
        self.channel = channel


class SimulationDivergedError(OrthoaugError):
    """A simulated state exceeded the overflow guard."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ParseError(OrthoaugError):
    """A data or config file could not be parsed."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class ArtifactError(OrthoaugError):
    """A model artifact is malformed or incompatible with the requested use."""
