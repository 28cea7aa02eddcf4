"""Masses, phase states and energy bookkeeping for the falling ball system.

Heights are measured from the floor, gravity is a unit downward
acceleration and the total energy of a particle is ``m q + m v**2 / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    DimensionError,
    InvalidConfigurationError,
)

ENERGY_TOL = 1e-9
TOL_DEG = 1e-12

STRICT_TOP = "strict-top"
NONINCREASING = "nonincreasing"
UNORDERED = "unordered"


def _ordering_class(m: Sequence[float]) -> str:
    if all(m[i] >= m[i + 1] for i in range(len(m) - 1)):
        return STRICT_TOP if m[0] > m[1] else NONINCREASING
    return UNORDERED


@dataclass(frozen=True)
class MassProfile:
    """Particle masses, bottom to top, with the derived collision coefficients.

    ``gamma[i]`` and ``c[i]`` belong to the pair of particles ``i+1, i+2``
    (1-based), i.e. Python index ``i`` couples ``m[i]`` and ``m[i+1]``.
    """

    m: tuple[float, ...]

    def __init__(self, m: Sequence[float]):
        masses = tuple(float(x) for x in m)
        if len(masses) < 2:
            raise DimensionError(f"need at least two particles, got {len(masses)}")
        if not all(x > 0 and math.isfinite(x) for x in masses):
            raise InvalidConfigurationError(f"masses must be positive and finite: {masses}")
        object.__setattr__(self, "m", masses)

    @property
    def n(self) -> int:
        return len(self.m)

    @cached_property
    def gamma(self) -> tuple[float, ...]:
        m = self.m
        return tuple((m[i] - m[i + 1]) / (m[i] + m[i + 1]) for i in range(self.n - 1))

    @cached_property
    def c(self) -> tuple[float, ...]:
        m = self.m
        return tuple(2.0 * m[i] * m[i + 1] / (m[i] + m[i + 1]) for i in range(self.n - 1))

    @property
    def ordering_class(self) -> str:
        return _ordering_class(self.m)

    @cached_property
    def masses(self) -> np.ndarray:
        arr = np.array(self.m)
        arr.flags.writeable = False
        return arr

    def to_dict(self) -> dict:
        return {
            "m": list(self.m),
            "gamma": list(self.gamma),
            "c": list(self.c),
            "ordering_class": self.ordering_class,
        }


@dataclass(frozen=True)
class PhaseState:
    """Positions and velocities of all particles, bottom to top.

    Only the ordering ``0 <= q_1 <= ... <= q_n`` is checked on
    construction; the energy shell needs the masses, see :func:`validate_state`.
    """

    q: tuple[float, ...]
    v: tuple[float, ...]
    energy_target: float = 1.0

    def __post_init__(self):
        q = tuple(float(x) for x in self.q)
        v = tuple(float(x) for x in self.v)
        if len(q) != len(v):
            raise DimensionError(f"q has {len(q)} entries but v has {len(v)}")
        if len(q) < 2:
            raise DimensionError("need at least two particles")
        if not (q[0] >= 0.0 and all(q[i] <= q[i + 1] for i in range(len(q) - 1))):
            raise InvalidConfigurationError(f"positions must satisfy 0 <= q_1 <= ... <= q_n: {q}")
        if not self.energy_target > 0:
            raise InvalidConfigurationError("energy_target must be positive")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "v", v)

    @property
    def n(self) -> int:
        return len(self.q)

    def momenta(self, mp: MassProfile) -> tuple[float, ...]:
        return tuple(mi * vi for mi, vi in zip(mp.m, self.v))

    def to_dict(self) -> dict:
        return {"q": list(self.q), "v": list(self.v), "energy_target": self.energy_target}


def _check_lengths(mp: MassProfile, q: Sequence[float], v: Sequence[float]) -> None:
    if len(q) != mp.n or len(v) != mp.n:
        raise DimensionError(f"expected {mp.n} positions and velocities, got {len(q)} and {len(v)}")


def particle_energies(mp: MassProfile, q: Sequence[float], v: Sequence[float]) -> list[float]:
    _check_lengths(mp, q, v)
    return [mi * qi + 0.5 * mi * vi * vi for mi, qi, vi in zip(mp.m, q, v)]


def total_energy(mp: MassProfile, q: Sequence[float], v: Sequence[float]) -> float:
    return math.fsum(particle_energies(mp, q, v))


def validate_state(mp: MassProfile, state: PhaseState, tol: float = ENERGY_TOL) -> None:
    """Raise unless ``state`` has the right size and lies on its energy shell."""
    _check_lengths(mp, state.q, state.v)
    drift = abs(total_energy(mp, state.q, state.v) - state.energy_target)
    if drift > tol:
        raise InvalidConfigurationError(
            f"state is off its energy shell by {drift:.3e} (tolerance {tol:.1e})"
        )


def normalize_to_shell(mp: MassProfile, q: Sequence[float], v: Sequence[float], H0: float = 1.0) -> PhaseState:
    """Rescale ``(q, v)`` to ``(s**2 q, s v)`` so that the energy equals ``H0``.

    The energy is homogeneous of degree two under this scaling, so
    ``s = sqrt(H0 / H)``.
    """
    if not H0 > 0:
        raise DegenerateInputError(f"target energy must be positive, got {H0}")
    H = total_energy(mp, q, v)
    if not H > 0:
        raise DegenerateInputError(f"cannot normalize a state with energy {H}")
    s = math.sqrt(H0 / H)
    s2 = s * s
    return PhaseState(tuple(s2 * x for x in q), tuple(s * x for x in v), H0)


def rods_to_points(r: float, mp: MassProfile, q_rods: Sequence[float], v: Sequence[float], H0: float):
    """Map hard rods of length ``2r`` to point particles.

    Returns the point-particle state and the shifted energy level.
    """
    _check_lengths(mp, q_rods, v)
    if r < 0:
        raise InvalidConfigurationError(f"rod half-length must be nonnegative, got {r}")
    if q_rods[0] < r:
        raise InvalidConfigurationError("lowest rod penetrates the floor")
    for i in range(mp.n - 1):
        if q_rods[i + 1] - q_rods[i] < 2 * r:
            raise InvalidConfigurationError(f"rods {i + 1} and {i + 2} overlap")
    q = [qi - (2 * i + 1) * r for i, qi in enumerate(q_rods)]
    shift = r * sum((2 * i + 1) * mi for i, mi in enumerate(mp.m))
    new_H0 = H0 - shift
    if not new_H0 > 0:
        raise InvalidConfigurationError(f"energy level {H0} is not above the rod ground-state energy {shift}")
    return PhaseState(tuple(q), tuple(v), new_H0), new_H0


def points_to_rods(r: float, mp: MassProfile, state: PhaseState, H0: float):
    """Inverse of :func:`rods_to_points`: returns ``(q_rods, v, rod energy level)``."""
    q_rods = tuple(qi + (2 * i + 1) * r for i, qi in enumerate(state.q))
    shift = r * sum((2 * i + 1) * mi for i, mi in enumerate(mp.m))
    return q_rods, state.v, H0 + shift


def is_degenerate(mp: MassProfile, state: PhaseState, tol: float = TOL_DEG) -> tuple[bool, int]:
    """Detect particles resting on the floor with zero energy.

    Returns ``(flag, k)`` where ``k`` is the largest count of bottom
    particles with ``q == v == 0`` (within ``tol``).
    """
    k = 0
    for qi, vi in zip(state.q, state.v):
        if abs(qi) <= tol and abs(vi) <= tol:
            k += 1
        else:
            break
    return k > 0, k


def sample_state(mp: MassProfile, H0: float = 1.0, seed: int | np.random.Generator | None = 0) -> PhaseState:
    """Draw a generic state on the energy shell ``H = H0``.

    Heights are sorted uniform draws, velocities are standard normal, and
    the pair is rescaled onto the shell. Draws with coincident heights or a
    particle on the floor are rejected, so the result never starts at a
    collision.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    while True:
        q = np.sort(rng.uniform(0.0, 1.0, mp.n))
        v = rng.standard_normal(mp.n)
        if q[0] <= 0.0 or np.any(np.diff(q) <= 0.0):
            continue
        state = normalize_to_shell(mp, q.tolist(), v.tolist(), H0)
        if state.q[0] > 0.0 and all(state.q[i] < state.q[i + 1] for i in range(mp.n - 1)):
            if not is_degenerate(mp, state)[0]:
                return state


def state_arrays(state: PhaseState) -> tuple[np.ndarray, np.ndarray]:
    return np.array(state.q), np.array(state.v)


__all__ = [
    "MassProfile",
    "PhaseState",
    "ENERGY_TOL",
    "TOL_DEG",
    "STRICT_TOP",
    "NONINCREASING",
    "UNORDERED",
    "particle_energies",
    "total_energy",
    "validate_state",
    "normalize_to_shell",
    "rods_to_points",
    "points_to_rods",
    "is_degenerate",
    "sample_state",
    "state_arrays",
]
