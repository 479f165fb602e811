"""Exceptions shared across the package."""


class ConfigurationError(ValueError):
    """A scenario, profile or parameter set violates its declared constraints."""


class AuditFailure(RuntimeError):
    """A recorded path contradicts the bookkeeping identities it must satisfy."""
