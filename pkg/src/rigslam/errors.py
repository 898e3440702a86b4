"""Exception types raised across the package."""


class RigSlamError(Exception):
    pass


class AngleNearPi(RigSlamError, ValueError):
    pass


class BehindCamera(RigSlamError, ValueError):
    pass


class IndexOutOfRange(RigSlamError, IndexError):
    pass


class UnknownId(RigSlamError, KeyError):
    pass


class TooFewMatches(RigSlamError, ValueError):
    pass


class SingularSystem(RigSlamError, ArithmeticError):
    pass


class NotTracking(RigSlamError, RuntimeError):
    pass


class InsufficientData(RigSlamError, ValueError):
    pass


class LoopRejected(RigSlamError, RuntimeError):
    pass


class SeparationUnsatisfiable(RigSlamError, ValueError):
    pass


class DegenerateGeometry(RigSlamError, ValueError):
    pass


class NoOverlap(RigSlamError, ValueError):
    pass


class ConfigError(RigSlamError, ValueError):
    """Bad configuration. ``key`` and ``line`` locate the problem when known."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
