class PvDseError(Exception):
    """Base class for errors raised by pvdse."""


class InvalidParameterError(PvDseError, ValueError):
    pass


class InvalidInputError(PvDseError, ValueError):
    pass


class SingularityError(PvDseError, ArithmeticError):
    """A rational term was evaluated with its denominator at or below the floor."""


class IdentificationError(PvDseError):
    """Sparse identification could not produce a usable model."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ObservabilityError(PvDseError):
    pass
