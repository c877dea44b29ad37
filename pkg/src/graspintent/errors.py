"""Exception types raised across the toolkit."""


class GraspIntentError(Exception):
    """Base class for all toolkit errors."""


# --- dataset / I/O ------------------------------------------------------------

class MissingFile(GraspIntentError):
    """A manifest or trial file does not exist."""


class SchemaError(GraspIntentError):
    """A file or in-memory structure violates the expected schema."""


class DuplicateTrialId(GraspIntentError):
    """Two trials share the same identifier."""


class MissingRole(GraspIntentError):
    """A required marker role is absent from the marker map."""


class InvalidConfig(GraspIntentError):
    """A configuration object violates its invariants."""


class DataIoError(GraspIntentError):
    """Reading or writing a data file failed at the OS level."""


# --- signal conditioning ------------------------------------------------------

class TooShort(GraspIntentError):
    """A signal has too few samples for the requested operation."""


class InvalidCutoff(GraspIntentError):
    """Filter cutoff outside (0, Nyquist)."""


class NoMotion(GraspIntentError):
    """Wrist speed never exceeds the segmentation threshold."""


class DegenerateFrame(GraspIntentError):
    """Hand-frame markers are collinear; no orthonormal frame exists."""


class InvalidFraction(GraspIntentError):
    """Snippet fraction outside the supported set."""


# --- distances / kernels ------------------------------------------------------

class DimensionMismatch(GraspIntentError):
    """Operands have incompatible channel or feature dimensions."""


class KTooLarge(GraspIntentError):
    """Requested neighbour / component / feature count exceeds what is available."""


class InvalidSigma(GraspIntentError):
    """Kernel bandwidth must be strictly positive."""


class EigenFailure(GraspIntentError):
    """Symmetric eigendecomposition did not converge."""


class NotPositiveDefinite(GraspIntentError):
    """Matrix logarithm requested for a matrix with a non-positive eigenvalue."""


class InvalidBandwidth(GraspIntentError):
    """Lift bandwidth must be strictly positive."""


# --- classification -----------------------------------------------------------

class SingleClass(GraspIntentError):
    """Training labels contain fewer than two classes."""


class NoConvergence(GraspIntentError):
    """Dual solver exhausted its kernel-evaluation budget."""


class NotLinear(GraspIntentError):
    """Operation requires a linear model but got a kernel one."""


# --- fusion -------------------------------------------------------------------

class RowMismatch(GraspIntentError):
    """Feature blocks disagree on the number of rows."""


class EmptyKernelList(GraspIntentError):
    """Late fusion needs at least one kernel."""


class OrderingMismatch(GraspIntentError):
    """Kernels passed to fusion do not share the same trial ordering."""


# --- protocol -----------------------------------------------------------------

class InsufficientCell(GraspIntentError):
    """A (subject, intention) cell has too few trials for a stratified split."""
