"""Exception types shared across the package."""

from __future__ import annotations


class RiccatiError(Exception):
    """Base class for every error raised by hjriccati."""


class DimensionMismatch(RiccatiError, ValueError):
    pass


class NumericalError(RiccatiError, ArithmeticError):
    """A numerical failure during a flow or factorization.

    ``operation`` names the routine that failed and ``step`` is the index of
    the RK4 step (or block) at which it happened, when known.
    """

    def __init__(self, message: str, operation: str | None = None, step: int | None = None):
        self.operation = operation
        self.step = step
        where = []
        if operation:
            where.append(f"operation={operation}")
        if step is not None:
            where.append(f"step={step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NonSPD(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class RootBracketFailure(RiccatiError, RuntimeError):
    pass


class NotPerfectSquare(RiccatiError, ValueError):
    pass


class OutOfDomain(RiccatiError, ValueError):
    pass


class ZeroReference(RiccatiError, ValueError):
    pass


class ConfigError(RiccatiError, ValueError):
    pass
