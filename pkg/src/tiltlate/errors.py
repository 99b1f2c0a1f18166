"""Exception hierarchy.

Validation errors describe bad input (CLI exit code 1); estimation errors
describe data that cannot support the requested estimand (exit code 2).
"""


class TiltLateError(Exception):
    """Base class for all package errors."""

    code = "TiltLateError"

    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context


class ValidationError(TiltLateError):
    code = "InvalidInput"


class EstimationError(TiltLateError):
    code = "EstimationFailure"


class MissingColumn(ValidationError):
    code = "MissingColumn"


class NonBinaryTreatment(ValidationError):
    code = "NonBinaryTreatment"


class NonFiniteValue(ValidationError):
    code = "NonFiniteValue"


class DegenerateInstrument(ValidationError):
    code = "DegenerateInstrument"


class BadFoldCount(ValidationError):
    code = "BadFoldCount"


class DegenerateTilt(ValidationError):
    code = "DegenerateTilt"


class BadOrder(ValidationError):
    code = "BadOrder"


class EmptyGrid(ValidationError):
    code = "EmptyGrid"


class NonMonotoneCDF(ValidationError):
    code = "NonMonotoneCDF"


class TiltOverflow(EstimationError):
    code = "TiltOverflow"


class LearnerFailure(EstimationError):
    code = "LearnerFailure"


class WeakInstrument(EstimationError):
    code = "WeakInstrument"


class EmptyStratum(EstimationError):
    code = "EmptyStratum"
