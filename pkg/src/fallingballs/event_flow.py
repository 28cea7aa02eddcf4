"""Exact event-driven evolution of the falling ball system.

Between collisions every particle follows a parabola with unit downward
acceleration, so all pairwise gaps are linear in time and the next
collision time is available in closed form. The hot loop works on plain
Python floats; for three to five particles that is faster than numpy.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .core_state import MassProfile, PhaseState, is_degenerate, total_energy
from .errors import (
    AccumulationGuardError,
    ContractError,
    DegenerateStateError,
    InternalConsistencyError,
    SingularityError,
)

TOL_TIE = 1e-12
BURST_LIMIT = 10_000
BURST_WINDOW = 1.0
BURST_TAIL = 100

FLOOR = 0


@dataclass(frozen=True)
class CollisionEvent:
    """One collision.

    ``sigma == 0`` is a floor bounce of the lowest particle and
    ``sigma == i >= 1`` a collision of particles ``i`` and ``i+1`` (1-based).
    ``q`` holds the positions at the moment of contact.
    """

    t: float
    sigma: int
    q: tuple[float, ...]
    v_pre: tuple[float, ...]
    v_post: tuple[float, ...]

    def pre_state(self, energy_target: float = 1.0) -> PhaseState:
        return PhaseState(self.q, self.v_pre, energy_target)

    def post_state(self, energy_target: float = 1.0) -> PhaseState:
        return PhaseState(self.q, self.v_post, energy_target)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "sigma": self.sigma,
            "q": list(self.q),
            "v_pre": list(self.v_pre),
            "v_post": list(self.v_post),
        }


@dataclass(frozen=True)
class SymbolicSequence:
    sigmas: tuple[int, ...] = ()
    times: tuple[float, ...] = ()

    def __post_init__(self):
        sigmas = tuple(int(s) for s in self.sigmas)
        times = tuple(float(t) for t in self.times)
        if len(sigmas) != len(times):
            raise ContractError("sigmas and times differ in length")
        if any(times[k + 1] <= times[k] for k in range(len(times) - 1)):
            raise ContractError("collision times must be strictly increasing")
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "times", times)

    def __len__(self) -> int:
        return len(self.sigmas)

    @classmethod
    def from_events(cls, events: Sequence[CollisionEvent]) -> "SymbolicSequence":
        return cls(tuple(e.sigma for e in events), tuple(e.t for e in events))

    def truncated(self, k: int) -> "SymbolicSequence":
        return SymbolicSequence(self.sigmas[:k], self.times[:k])


@dataclass
class FlowDiagnostics:
    n_events: int = 0
    elapsed: float = 0.0
    max_burst: int = 0
    max_energy_drift: float = 0.0
    events: list[CollisionEvent] = field(default_factory=list)

    @property
    def event_rate(self) -> float:
        return self.n_events / self.elapsed if self.elapsed > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "n_events": self.n_events,
            "elapsed": self.elapsed,
            "event_rate": self.event_rate,
            "max_burst": self.max_burst,
            "max_energy_drift": self.max_energy_drift,
        }


class Advance(NamedTuple):
    state: PhaseState
    sequence: SymbolicSequence
    diagnostics: FlowDiagnostics


def _floor_time(q1: float, v1: float) -> float:
    # positive root of q1 + v1 t - t^2/2 = 0, in a cancellation-free form
    root = math.sqrt(v1 * v1 + 2.0 * q1)
    if v1 >= 0.0:
        return v1 + root
    denom = root - v1
    return 2.0 * q1 / denom if denom > 0.0 else 0.0


def _candidates(q: list[float], v: list[float], base: int = 0) -> tuple[float, int, float, int]:
    """Smallest and second smallest candidate event times with their types.

    ``base`` is the index of the lowest moving particle; it bounces off
    the floor (or off a frozen stack) and that event is labelled ``base``.
    """
    t1 = _floor_time(q[base], v[base])
    s1 = base
    t2 = math.inf
    s2 = -1
    for i in range(base, len(q) - 1):
        w = v[i] - v[i + 1]
        if w > 0.0:
            t = (q[i + 1] - q[i]) / w
            if t < t1:
                t2, s2 = t1, s1
                t1, s1 = t, i + 1
            elif t < t2:
                t2, s2 = t, i + 1
    return t1, s1, t2, s2


def next_event(mp: MassProfile, state: PhaseState, tol_tie: float = TOL_TIE) -> tuple[float, int]:
    """Time until the next collision and its type.

    Raises :class:`SingularityError` when the two earliest candidates are
    closer than ``tol_tie`` relative to the earliest, and
    :class:`DegenerateStateError` for particles resting on the floor.
    """
    degenerate, k = is_degenerate(mp, state)
    if degenerate:
        raise DegenerateStateError(f"{k} particle(s) rest on the floor with zero energy", k)
    t1, s1, t2, s2 = _candidates(list(state.q), list(state.v))
    if t2 - t1 <= tol_tie * t1:
        raise SingularityError(f"simultaneous collisions {s1} and {s2} at dt={t1!r}", t1, (s1, s2))
    return t1, s1


def free_flight(state: PhaseState, dt: float, mp: MassProfile | None = None) -> PhaseState:
    """Move every particle along its parabola for ``dt``.

    When ``mp`` is given the precondition that no collision happens in
    ``(0, dt)`` is checked.
    """
    if dt < 0:
        raise ContractError(f"flight time must be nonnegative, got {dt}")
    if mp is not None and dt > 0:
        t_next = _candidates(list(state.q), list(state.v))[0]
        if dt > t_next:
            raise ContractError(f"flight of {dt} overshoots the next collision at {t_next}")
    if dt == 0:
        return state
    half = 0.5 * dt * dt
    q = tuple(qi + vi * dt - half for qi, vi in zip(state.q, state.v))
    v = tuple(vi - dt for vi in state.v)
    return PhaseState(q, v, state.energy_target)


def apply_pair_collision(mp: MassProfile, state: PhaseState, i: int, tol: float = 1e-9) -> PhaseState:
    """Elastic collision of particles ``i`` and ``i+1`` (1-based)."""
    if not 1 <= i <= mp.n - 1:
        raise ContractError(f"pair index {i} out of range 1..{mp.n - 1}")
    a, b = i - 1, i
    q = list(state.q)
    v = list(state.v)
    if abs(q[b] - q[a]) > tol * max(1.0, abs(q[b])):
        raise ContractError(f"particles {i} and {i + 1} are not in contact")
    if not v[a] > v[b]:
        raise ContractError(f"particles {i} and {i + 1} are not approaching")
    q[a] = q[b]
    _collide_pair(v, a, mp.gamma[a])
    return PhaseState(tuple(q), tuple(v), state.energy_target)


def apply_floor_collision(state: PhaseState, tol: float = 1e-9) -> PhaseState:
    """Elastic bounce of the lowest particle off the floor."""
    q = list(state.q)
    v = list(state.v)
    if abs(q[0]) > tol:
        raise ContractError("lowest particle is not on the floor")
    if not v[0] < 0:
        raise ContractError("lowest particle is not moving towards the floor")
    q[0] = 0.0
    v[0] = -v[0]
    return PhaseState(tuple(q), tuple(v), state.energy_target)


def _collide_pair(v: list[float], a: int, g: float) -> None:
    va, vb = v[a], v[a + 1]
    ua = g * va + (1.0 - g) * vb
    ub = (1.0 + g) * va - g * vb
    if not ua < ub:
        raise InternalConsistencyError(
            f"particles {a + 1} and {a + 2} failed to separate: {ua!r} >= {ub!r}"
        )
    v[a] = ua
    v[a + 1] = ub


def burst_tail_oscillation(velocities: np.ndarray) -> np.ndarray:
    """Cauchy-type oscillation of velocity sequences over shrinking tails.

    Entry ``j`` is ``max_i (max_{k>=j} v_i - min_{k>=j} v_i)``; it is
    nonincreasing in ``j`` and tends to zero for convergent sequences.
    """
    vel = np.asarray(velocities, dtype=float)
    hi = np.maximum.accumulate(vel[::-1], axis=0)[::-1]
    lo = np.minimum.accumulate(vel[::-1], axis=0)[::-1]
    return (hi - lo).max(axis=1)


class EventStepper:
    """Mutable single-trajectory engine: one :meth:`step` per collision.

    ``frozen`` particles at the bottom are held at rest on the floor
    (degenerate-orbit convention); the lowest moving particle then bounces
    off the resting stack and that event is labelled ``sigma = frozen``.
    """

    def __init__(
        self,
        mp: MassProfile,
        state: PhaseState,
        *,
        t0: float = 0.0,
        tol_tie: float = TOL_TIE,
        burst_limit: int = BURST_LIMIT,
        burst_window: float = BURST_WINDOW,
        frozen: int = 0,
        track_energy: bool = False,
    ):
        if state.n != mp.n:
            raise ContractError(f"state has {state.n} particles, masses describe {mp.n}")
        degenerate, k = is_degenerate(mp, state)
        if frozen == 0 and degenerate:
            raise DegenerateStateError(
                f"{k} particle(s) rest on the floor with zero energy; use the degenerate demo mode", k
            )
        if frozen and (k < frozen or frozen >= mp.n):
            raise ContractError(f"cannot freeze {frozen} particles of this state (stuck count {k})")
        self.mp = mp
        self.q = list(state.q)
        self.v = list(state.v)
        if frozen:
            for j in range(frozen):
                self.q[j] = 0.0
                self.v[j] = 0.0
        self.t = t0
        self.energy_target = state.energy_target
        self.tol_tie = tol_tie
        self.burst_limit = burst_limit
        self.burst_window = burst_window
        self.frozen = frozen
        self.track_energy = track_energy
        self.n_events = 0
        self.max_burst = 0
        self.max_energy_drift = 0.0
        self._recent: deque = deque()
        self._gamma = mp.gamma

    @property
    def state(self) -> PhaseState:
        return PhaseState(tuple(self.q), tuple(self.v), self.energy_target)

    def peek(self) -> tuple[float, int]:
        """Time until the next event and its type, with the tie check."""
        t1, s1, t2, s2 = _candidates(self.q, self.v, self.frozen)
        if t2 - t1 <= self.tol_tie * t1:
            raise SingularityError(
                f"simultaneous collisions {s1} and {s2} at t={self.t + t1!r}", self.t + t1, (s1, s2)
            )
        return t1, s1

    def fly(self, dt: float) -> None:
        if dt <= 0.0:
            return
        half = 0.5 * dt * dt
        q, v = self.q, self.v
        for j in range(self.frozen, len(q)):
            q[j] += v[j] * dt - half
            v[j] -= dt
        self.t += dt

    def step(self) -> CollisionEvent:
        dt, sigma = self.peek()
        self.fly(dt)
        q, v = self.q, self.v
        v_pre = tuple(v)
        base = self.frozen
        if sigma == base:
            q[base] = 0.0
            v[base] = -v[base]
        else:
            q[sigma - 1] = q[sigma]
            _collide_pair(v, sigma - 1, self._gamma[sigma - 1])
        self.n_events += 1
        event = CollisionEvent(self.t, sigma, tuple(q), v_pre, tuple(v))
        self._guard(event)
        if self.track_energy:
            drift = abs(total_energy(self.mp, q, v) - self.energy_target)
            if drift > self.max_energy_drift:
                self.max_energy_drift = drift
        return event

    def _guard(self, event: CollisionEvent) -> None:
        recent = self._recent
        recent.append(event)
        horizon = event.t - self.burst_window
        while recent[0].t < horizon:
            recent.popleft()
        size = len(recent)
        if size > self.max_burst:
            self.max_burst = size
        if size > self.burst_limit:
            tail = list(recent)[-BURST_TAIL:]
            osc = burst_tail_oscillation([e.v_pre for e in tail])
            raise AccumulationGuardError(
                f"{size} collisions within {self.burst_window} time units ending at t={event.t!r}",
                event.t,
                {
                    "times": [e.t for e in tail],
                    "sigmas": [e.sigma for e in tail],
                    "v_pre": [list(e.v_pre) for e in tail],
                    "tail_oscillation": osc.tolist(),
                    "burst_size": size,
                },
            )


def advance(
    mp: MassProfile,
    state: PhaseState,
    max_events: int | None = None,
    max_time: float | None = None,
    *,
    tol_tie: float = TOL_TIE,
    burst_limit: int = BURST_LIMIT,
    burst_window: float = BURST_WINDOW,
    record: bool = True,
    frozen: int = 0,
) -> Advance:
    """Evolve ``state`` until ``max_events`` collisions or time ``max_time``.

    When both budgets are given the first one reached stops the run. With
    ``max_time`` the returned state is exactly at that time; otherwise it
    is the post-collision state of the last event.
    """
    if max_events is None and max_time is None:
        raise ContractError("advance needs max_events or max_time")
    stepper = EventStepper(
        mp,
        state,
        tol_tie=tol_tie,
        burst_limit=burst_limit,
        burst_window=burst_window,
        frozen=frozen,
        track_energy=True,
    )
    events: list[CollisionEvent] = []
    sigmas: list[int] = []
    times: list[float] = []
    while max_events is None or stepper.n_events < max_events:
        if max_time is not None:
            dt, _ = stepper.peek()
            if stepper.t + dt > max_time:
                break
        event = stepper.step()
        sigmas.append(event.sigma)
        times.append(event.t)
        if record:
            events.append(event)
    if max_time is not None and stepper.t < max_time and (max_events is None or stepper.n_events < max_events):
        stepper.fly(max_time - stepper.t)
        stepper.t = max_time
    diag = FlowDiagnostics(
        n_events=stepper.n_events,
        elapsed=stepper.t,
        max_burst=stepper.max_burst,
        max_energy_drift=stepper.max_energy_drift,
        events=events,
    )
    return Advance(stepper.state, SymbolicSequence(tuple(sigmas), tuple(times)), diag)


def degenerate_demo(mp: MassProfile, state: PhaseState, max_events: int, **kwargs) -> Advance:
    """Evolve a degenerate state with its resting particles held on the floor."""
    degenerate, k = is_degenerate(mp, state)
    if not degenerate:
        raise ContractError("state is not degenerate")
    if k >= mp.n:
        # everything rests; nothing ever happens
        return Advance(state, SymbolicSequence(), FlowDiagnostics())
    return advance(mp, state, max_events=max_events, frozen=k, **kwargs)


def negate_velocities(state: PhaseState) -> PhaseState:
    return PhaseState(state.q, tuple(-x for x in state.v), state.energy_target)
