"""Exception hierarchy shared across the package."""


class UspError(Exception):
    """Base class for every error raised by this package."""
