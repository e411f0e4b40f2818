"""Exception hierarchy shared by every module."""


class DualNavError(Exception):
    """Base class for all package errors."""


class ParseError(DualNavError):
    pass


class ValidationError(DualNavError):
    pass


class OutOfBounds(DualNavError):
    pass


class NoPath(DualNavError):
    pass


class CompileError(DualNavError):
    """Raised when a cell path cannot be turned into a collision-free action list."""


class DegenerateGeometry(DualNavError):
    pass


class InsufficientCandidates(DualNavError):
    pass


class PolicyFault(DualNavError):
    pass


class ReplayMismatch(DualNavError):
    pass


class MissingTokenCounts(DualNavError):
    pass


class SchemaError(DualNavError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GenerationExhausted(DualNavError):
    pass
