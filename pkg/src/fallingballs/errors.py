"""Exception hierarchy shared by the simulator and the analysis tools."""

from __future__ import annotations


class FallingBallsError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(FallingBallsError, ValueError):
    pass


class DegenerateInputError(FallingBallsError, ValueError):
    pass


class InvalidConfigurationError(FallingBallsError, ValueError):
    pass


class ContractError(FallingBallsError):
    """A documented precondition or postcondition did not hold."""


class InternalConsistencyError(ContractError):
    """Numerical corruption detected (e.g. colliding particles failed to separate)."""


class SingularityError(FallingBallsError):
    """Two collisions are (numerically) simultaneous.

    ``t`` is the absolute time of the offending event and ``sigmas`` the
    colliding event types.
    """

    def __init__(self, message: str, t: float = float("nan"), sigmas: tuple[int, ...] = ()):
        super().__init__(message)
        self.t = t
        self.sigmas = sigmas


class DegenerateStateError(FallingBallsError):
    """The state has particles resting on the floor with zero energy."""

    def __init__(self, message: str, k: int = 0):
        super().__init__(message)
        self.k = k


class AccumulationGuardError(FallingBallsError):
    """Too many collisions inside a short time window.

    ``diagnostic`` carries the burst record (times, velocities and the
    tail-oscillation sequence) so callers can inspect the near-accumulation.
    """

    def __init__(self, message: str, t: float, diagnostic: dict | None = None):
        super().__init__(message)
        self.t = t
        self.diagnostic = diagnostic or {}


class OracleUnreliableError(FallingBallsError):
    """Perturbed orbits used by a finite-difference oracle changed their collision sequence."""


class ConfigError(FallingBallsError, ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.message = message
        self.field = field
        self.line = line
