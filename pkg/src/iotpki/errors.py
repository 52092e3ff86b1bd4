"""Shared exception hierarchy.

Every domain-level failure raised by this package derives from
:class:`IotPkiError`, so callers (notably the CLI) can distinguish
domain errors from programming errors and map them to exit codes.
"""


class IotPkiError(Exception):
    """Base class for all domain errors raised by iotpki modules."""


class IoFailure(IotPkiError):
    """Filesystem or socket operation failed (wraps the OSError)."""


class BindFailure(IotPkiError):
    """A network service could not bind its listen address."""
