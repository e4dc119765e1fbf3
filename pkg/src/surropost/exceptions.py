"""Exception hierarchy shared across the package."""


class SurropostError(Exception):
    """Base class for all package errors."""


class InputError(SurropostError):
    """Malformed or inconsistent inputs (dimension mismatch, bad ranges)."""


class FactorizationError(SurropostError):
    """Covariance factorization failed even after jitter escalation."""


class DegenerateUpdateError(SurropostError):
    """Attempted to add a duplicate of an existing noiseless design point."""


class UnsupportedKernelError(SurropostError):
    """Requested feature requires a kernel family that does not support it."""


class FittingError(SurropostError):
    """Hyperparameter optimization failed at every start point."""


class IntegrationError(SurropostError):
    """ODE integration produced a non-finite state."""


class DegenerateEstimateError(SurropostError):
    """Posterior estimate is identically zero or otherwise unusable."""


class ConfigError(SurropostError):
    """Invalid experiment configuration (CLI exit code 2)."""
