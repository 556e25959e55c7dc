"""Exception types shared across the package."""


class VoxsplatError(Exception):
    """Base class for package-specific errors."""


class InputDomainError(VoxsplatError, ValueError):
    """An input violates a documented precondition (non-finite values, bad shape, ...)."""


class DegenerateGeometryError(VoxsplatError):
    """A point set carries no usable surface geometry (coincident or collinear)."""


class NumericalDegeneracyError(VoxsplatError):
    """A matrix factorization failed even after regularization.

    ``key`` optionally identifies the voxel whose regression problem failed.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ContractViolationError(VoxsplatError):
    """Two pieces of data that must correspond to each other do not."""


class UndefinedLossError(VoxsplatError, ValueError):
    """A loss was requested on inputs for which it has no defined value."""


class NonFiniteLossError(VoxsplatError):
    """An optimization step produced a non-finite objective and was rejected."""


class ParseError(VoxsplatError, ValueError):
    """A file could not be parsed. Carries the file path and a location."""

    def __init__(self, path, location, reason):
        super().__init__(f"{path}: {location}: {reason}")
        self.path = str(path)
        self.location = location
        self.reason = reason
