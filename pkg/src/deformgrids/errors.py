"""Exception types shared across the package."""


class DeformGridsError(Exception):
    """Base class for all package errors."""


class InputError(DeformGridsError, ValueError):
    """Rejected input: empty clouds, bad indices, shape mismatches."""


class DegenerateGeometryError(DeformGridsError, ValueError):
    """Geometry with zero extent or zero surface area."""


class NumericalError(DeformGridsError, ArithmeticError):
    """Non-finite values encountered during optimization."""


class ConfigError(DeformGridsError, ValueError):
    """Invalid run configuration."""
