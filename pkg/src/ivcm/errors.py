"""Exception types raised across the package."""


class IvcmError(Exception):
    """Base class for all package-specific errors."""


# --- data ingestion ---

class MalformedInput(IvcmError):
    """CSV structure is wrong: bad header, missing fields, unparsable values."""


class MissingFollowUp(IvcmError):
    """A subject has observations but no follow-up row."""


class TimeOutOfRange(IvcmError):
    """An observation time or follow-up time falls outside its valid range."""


class NonFiniteValue(IvcmError):
    """NaN or infinity encountered where a finite number is required."""


class DuplicateTime(IvcmError):
    """Two observations of the same subject share an observation time."""


class DimensionMismatch(IvcmError):
    """Array shapes are inconsistent with the dataset layout."""


# --- intensity model ---

class EmptyRiskSet(IvcmError):
    """An event time has no at-risk subjects (data inconsistency)."""


class SingularHessian(IvcmError):
    """Negated partial-likelihood hessian is not positive definite.

    Signals collinear or degenerate history covariates.
    """


class NoConvergence(IvcmError):
    """Newton-Raphson failed to converge; carries the last iterate."""

    def __init__(self, message, gamma=None, trace=None):
        super().__init__(message)
        self.gamma = gamma
        self.trace = trace


class NonPositiveBandwidth(IvcmError):
    """Kernel bandwidth must be strictly positive."""


# --- splines ---

class OutOfDomain(IvcmError):
    """Evaluation point lies outside the basis domain [0, tau]."""


class DerivativeOrderTooHigh(IvcmError):
    """Requested derivative order is >= the spline order."""


# --- coefficient fitting ---

class SingularSystem(IvcmError):
    """Weighted least-squares system could not be factorized, even ridged."""


# --- bootstrap ---

class DegenerateEnsemble(IvcmError):
    """Fewer than two bootstrap replicates."""


# --- FPCA ---

class EmptyNeighborhood(IvcmError):
    """A grid cell has zero kernel mass even after enlarging the bandwidth."""


class NonSymmetricInput(IvcmError):
    """Covariance surface passed to the eigensolver is not symmetric."""


# --- simulation ---

class RunawayProcess(IvcmError):
    """A simulated subject generated an implausible number of events."""


class StudyAborted(IvcmError):
    """Too many replicate-level failures in a simulation study."""


# --- CLI ---

class ConfigError(IvcmError):
    """Invalid study configuration or command-line arguments."""
