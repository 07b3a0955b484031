"""Exception hierarchy shared by all kronsep modules."""


class KronsepError(Exception):
    """Base class for every error raised by kronsep."""


class NotPositiveDefinite(KronsepError):
    """A Cholesky pivot was not strictly positive."""


class DimensionMismatch(KronsepError, ValueError):
    pass


class DomainError(KronsepError, ValueError):
    pass


# -- data ingestion ---------------------------------------------------------

class DataError(KronsepError):
    """Problems with an input dataset."""


class MissingColumn(DataError):
    def __init__(self, column):
        super().__init__(f"required column {column!r} not found in header")
        self.column = column


class NonNumericCell(DataError):
    def __init__(self, row, col, value):
        super().__init__(f"row {row}, column {col!r}: cannot parse {value!r} as a number")
        self.row = row
        self.col = col


class DuplicateObservation(DataError):
    def __init__(self, subject, time, location):
        super().__init__(
            f"subject {subject!r} has more than one row at time={time!r}, loc={location!r}"
        )
        self.subject = subject
        self.time = time
        self.location = location


class EmptyDataset(DataError):
    pass


class RaggedSubject(DataError):
    """A subject's observed cells do not form a complete time x location sub-grid."""

    def __init__(self, subject, n_obs, n_times, n_locs):
        super().__init__(
            f"subject {subject!r}: {n_obs} observations do not cover the "
            f"{n_times} x {n_locs} product of its observed times and locations"
        )
        self.subject = subject


class DegenerateFactor(DataError):
    """No subject has two distinct points on a factor, so its distance scale is undefined."""


class NegativeDistance(KronsepError, ValueError):
    pass


# -- estimation ---------------------------------------------------------------

class SingularNormalEquations(KronsepError):
    pass


class DegenerateResiduals(KronsepError):
    """The weighted residual sum of squares is zero (interpolating fit)."""


class NonConvergence(KronsepError):
    """The optimizer stopped before meeting its convergence criteria.

    ``result`` holds the last iterate (a fit result with ``converged=False``).
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class AllStartsInadmissible(KronsepError):
    pass


class UnidentifiedCell(KronsepError):
    def __init__(self, cell):
        super().__init__(
            f"maximal-grid cell (time index {cell[0]}, location index {cell[1]}) "
            "is never observed; its covariance parameters are not estimable"
        )
        self.cell = cell


# -- testing ----------------------------------------------------------------

class NonPositiveDf(KronsepError, ValueError):
    pass


class FitNotConverged(KronsepError):
    def __init__(self, which, message=None):
        msg = message or (
            f"the {which} model fit did not converge; no test statistic is reported. "
            "The data may not support an unstructured covariance model; a more "
            "parsimonious covariance model (e.g. the separable Kronecker structure) "
            "should be used instead."
        )
        super().__init__(msg)
        self.which = which


class StudyAborted(KronsepError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
