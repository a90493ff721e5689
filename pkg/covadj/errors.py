class CovAdjError(ValueError):
    """Base class for every error raised by the covadj library."""


class DataFormatError(CovAdjError):
    pass


class RankDeficientError(CovAdjError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class ConvergenceError(CovAdjError):
    pass


class NonPositiveDefiniteError(CovAdjError):
    pass


class AllocationError(CovAdjError):
    pass


class DegenerateScoresError(CovAdjError):
    pass


class EnumerationCapError(CovAdjError):
    pass


class ModelTooRichError(CovAdjError):
    pass


class StudyAbortedError(CovAdjError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
