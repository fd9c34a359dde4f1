"""Exception hierarchy shared by every module.

The CLI maps ``ConfigError`` to exit code 2 and every other ``RectiflowError``
to exit code 1.
"""


class RectiflowError(Exception):
    pass


class ConfigError(RectiflowError, ValueError):
    pass


class ShapeError(RectiflowError, ValueError):
    pass


class DomainError(RectiflowError, ValueError):
    pass


class FormatError(RectiflowError, ValueError):
    pass


class LengthMismatchError(FormatError):
    pass


class ConsistencyError(RectiflowError, ValueError):
    pass


class IntegrityError(RectiflowError):
    def __init__(self, message, entry=None):
        super().__init__(message)
        self.entry = entry


class TrainingFault(RectiflowError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class IntegrationFault(RectiflowError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DegenerateTrajectoryError(RectiflowError, ValueError):
    pass


class DegeneratePlaneError(RectiflowError, ValueError):
    pass


class AnalysisError(RectiflowError):
    pass


class ComparisonInvalidError(RectiflowError):
    pass
