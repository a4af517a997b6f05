"""Exception types raised across the package."""


class StarTrackerError(Exception):
    """Base class for all package errors."""


class InvalidInputError(StarTrackerError, ValueError):
    pass


class InsufficientDataError(StarTrackerError, ValueError):
    pass


class DegenerateGeometryError(StarTrackerError, ValueError):
    pass


class CatalogParseError(StarTrackerError, ValueError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyCatalogError(StarTrackerError, ValueError):
    pass


class OrderingError(StarTrackerError, ValueError):
    pass


class AmbiguousPlaneError(StarTrackerError, ArithmeticError):
    pass


class InconsistentPlaneError(StarTrackerError, ArithmeticError):
    pass


class DegenerateProjectionError(StarTrackerError, ArithmeticError):
    pass


class SingularRegressorError(StarTrackerError, ArithmeticError):
    pass


class DomainError(StarTrackerError, ValueError):
    pass
