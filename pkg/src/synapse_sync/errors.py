"""Exception hierarchy shared by all modules."""


class SynapseSyncError(Exception):
    """Base class for every error raised by this package."""


class DomainError(SynapseSyncError, ValueError):
    """An input lies outside the region where an operation is defined."""


class GeometryError(SynapseSyncError):
    """Nullcline geometry is missing, malformed or inconsistent."""


class NotNShapedError(GeometryError):
    """The voltage nullcline lacks the two knees of an N shape."""


class OffBranchError(GeometryError):
    """A gating value is past the knee where the requested branch ends."""


class DegenerateFlowError(SynapseSyncError):
    """A branch flow comes too close to zero on its interval."""


class NumericError(SynapseSyncError):
    """Quadrature, root finding or another numerical procedure failed."""


class InstabilityError(NumericError):
    """An ODE state left its domain box."""


class InvariantViolation(SynapseSyncError):
    """An internal invariant of the event engine was broken."""


class NoInvariantSetError(SynapseSyncError):
    """An iterate of the return map left the synchronous spiking region."""


class NonConvergenceError(NumericError):
    """An iteration hit its limit before meeting its tolerance."""


class ConfigError(SynapseSyncError, ValueError):
    """An experiment configuration is malformed or fails validation."""
