"""Exception hierarchy used across the package."""


class PriceHazardError(Exception):
    """Base class for all package errors."""


class UnindexedIdentifierError(PriceHazardError, KeyError):
    """A user or item index is outside the dense range of the log."""


class SchemaError(PriceHazardError, ValueError):
    """An input file does not have the expected columns."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class EmptyDatasetError(PriceHazardError, ValueError):
    pass


class SupportError(PriceHazardError, ValueError):
    """A value lies outside the support of a density or transform."""


class NumericError(PriceHazardError, FloatingPointError):
    pass


class FitDivergedError(PriceHazardError, RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = [] if trace is None else list(trace)


class ColdStartError(PriceHazardError, KeyError):
    """Prediction was requested for a user or item the model never saw."""


class SimulationError(PriceHazardError, RuntimeError):
    pass
