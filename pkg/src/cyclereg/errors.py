"""Exception hierarchy shared across the package."""


class CycleRegError(Exception):
    """Base class for all package-specific errors."""


class GridError(CycleRegError, ValueError):
    """Incompatible grids: shape, spacing, or grid-scale mismatch."""


class DataError(CycleRegError):
    """Missing, corrupt, or inconsistent on-disk data."""


class DivergenceError(CycleRegError, RuntimeError):
    """Training produced a non-finite loss or otherwise blew up."""


class UsageError(CycleRegError):
    """Invalid command-line or configuration usage."""
