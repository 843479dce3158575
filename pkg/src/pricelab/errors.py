"""Exception taxonomy shared across the package.

Everything raised on purpose derives from :class:`PricelabError` so callers can
catch one base class at the CLI boundary. Validation helpers raise the most
specific subclass that applies.
"""


class PricelabError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(PricelabError):
    """A required column or field is missing or has the wrong type."""


class IntegrityError(PricelabError):
    """Input data violates a dataset invariant (duplicates, bad weights)."""


class CoverageError(PricelabError):
    """A lookup series or transform does not cover the data it is applied to."""


class DeflationError(PricelabError):
    """Refused to deflate a column that is not on a level scale."""


class StackingError(PricelabError):
    """Border-pair stacking was asked to do something incoherent."""


class DesignError(PricelabError):
    """A regression or study design is malformed for the requested operation."""


class EmptyDesignError(DesignError):
    """Every regressor was absorbed or dropped; nothing left to estimate."""


class IdentificationError(DesignError):
    """The data cannot identify the requested effect (degenerate variation)."""


class ConvergenceError(PricelabError):
    """An iterative solver exhausted its iteration budget."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class InferenceError(PricelabError):
    """A variance plan cannot be evaluated on this fit."""


class AlignmentError(PricelabError):
    """Objects that must share an index (years, units) do not."""


class CrossValidationError(PricelabError):
    """Cross-validation is impossible on the given data or grid."""


class CalibrationError(PricelabError):
    """Model parameters or paths violate a domain restriction."""


class SolverError(PricelabError):
    """No candidate satisfied the optimality conditions."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DivergenceError(PricelabError):
    """An infinite sum fails its convergence condition."""


class ConfigError(PricelabError):
    """A run-spec file is malformed or inconsistent."""
