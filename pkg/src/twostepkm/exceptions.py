"""Exception hierarchy.

Validation problems (bad input, missing columns) and estimation problems
(something about the data prevents computing an estimand) are kept apart
because the command line maps them to different exit codes.
"""


class TwoStepKMError(Exception):
    """Base class for all package errors."""


class ValidationError(TwoStepKMError, ValueError):
    """Input data or configuration does not meet a requirement."""


class EstimationError(TwoStepKMError, RuntimeError):
    """An estimator could not produce a value on the given data."""


class IdentificationError(EstimationError):
    """Requested point lies outside the region identified by the data."""


class SeparationError(EstimationError):
    """Logistic likelihood has no finite maximiser."""


class WeakInstrumentError(EstimationError):
    pass


class BootstrapError(EstimationError):
    pass
