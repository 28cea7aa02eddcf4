"""Collision-to-collision return map, its tangent cocycle and Lyapunov spectra."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import mpmath
import numpy as np

from .core_state import MassProfile, PhaseState, normalize_to_shell
from .errors import ContractError, SingularityError
from .event_flow import (
    BURST_LIMIT,
    BURST_WINDOW,
    TOL_TIE,
    CollisionEvent,
    EventStepper,
)
from .tangent import (
    TangentFrame,
    center_dv,
    event_jump_arrays,
    floor_jump_arrays,
    pair_jump_arrays,
    section_basis,
)

HISTORY_EVERY = 100
MAX_RESTARTS = 5
RESTART_KICK = 1e-9
CONVERGENCE_OSC = 0.10


@dataclass(frozen=True)
class SectionPoint:
    """A state immediately after a collision of type ``last_sigma`` at time ``t_abs``."""

    state: PhaseState
    last_sigma: int
    t_abs: float = 0.0

    def __post_init__(self):
        q, v, s = self.state.q, self.state.v, self.last_sigma
        if s == 0:
            ok = q[0] == 0.0 and v[0] > 0.0
        elif 1 <= s < self.state.n:
            ok = q[s - 1] == q[s] and v[s - 1] < v[s]
        else:
            ok = False
        if not ok:
            raise ContractError(f"state is not just after a collision of type {s}")

    @classmethod
    def from_event(cls, event: CollisionEvent, energy_target: float = 1.0) -> "SectionPoint":
        return cls(event.post_state(energy_target), event.sigma, event.t)


@dataclass
class LyapunovEstimate:
    map_exponents: np.ndarray
    flow_exponents: np.ndarray
    mean_return_time: float
    n_returns: int
    # (returns so far, mean return time so far, running map exponents)
    history: list[tuple[int, float, list[float]]] = field(default_factory=list)
    restarts: int = 0
    qr_stride: int = 1
    masses: tuple[float, ...] = ()

    @property
    def pairing_defect(self) -> float:
        lam = self.map_exponents
        return float(np.abs(lam + lam[::-1]).max())

    @property
    def flow_pairing_defect(self) -> float:
        lam = self.flow_exponents
        return float(np.abs(lam + lam[::-1]).max())

    def history_flow(self) -> np.ndarray:
        """Running flow exponents, one row per history entry."""
        rows = [np.array(lam) / tau for _, tau, lam in self.history]
        return np.array(rows) if rows else np.zeros((0, len(self.map_exponents)))

    def convergence_error(self) -> np.ndarray:
        """Per-exponent spread (max - min) of the running flow estimates over the last half."""
        hist = self.history_flow()
        if len(hist) < 2:
            return np.full(len(self.flow_exponents), np.inf)
        tail = hist[len(hist) // 2 :]
        return tail.max(axis=0) - tail.min(axis=0)

    def to_dict(self) -> dict:
        return {
            "masses": list(self.masses),
            "map_exponents": self.map_exponents.tolist(),
            "flow_exponents": self.flow_exponents.tolist(),
            "mean_return_time": self.mean_return_time,
            "n_returns": self.n_returns,
            "qr_stride": self.qr_stride,
            "restarts": self.restarts,
            "pairing_defect": self.pairing_defect,
            "flow_pairing_defect": self.flow_pairing_defect,
        }


def return_time_cap(mp: MassProfile, H0: float) -> float:
    """Upper bound on the time between consecutive collisions on the shell ``H = H0``.

    The lowest particle alone reaches the floor within
    ``(1 + sqrt 2) sqrt(2 H0 / m_1)``, and any earlier collision only
    shortens the wait.
    """
    return (1.0 + math.sqrt(2.0)) * math.sqrt(2.0 * H0 / mp.m[0])


def poincare_step(mp: MassProfile, sp: SectionPoint, **kwargs) -> tuple[SectionPoint, float]:
    """Advance to the next collision; returns the new section point and the elapsed time."""
    stepper = EventStepper(mp, sp.state, t0=sp.t_abs, **kwargs)
    event = stepper.step()
    dt = event.t - sp.t_abs
    cap = return_time_cap(mp, sp.state.energy_target)
    if not 0.0 < dt <= cap * (1 + 1e-9):
        raise ContractError(f"return time {dt} outside (0, {cap}]")
    return SectionPoint.from_event(event, sp.state.energy_target), dt


def cocycle_step(mp: MassProfile, sp: SectionPoint, frame: TangentFrame, **kwargs):
    """Carry ``frame`` from ``sp`` across the next collision.

    Returns ``(new section point, new frame, event)``.
    """
    stepper = EventStepper(mp, sp.state, t0=sp.t_abs, **kwargs)
    event = stepper.step()
    dh, dv = event_jump_arrays(mp, event, frame.dh, frame.dv)
    dh = dh - dh.mean(axis=0)
    new_sp = SectionPoint.from_event(event, sp.state.energy_target)
    return new_sp, TangentFrame(dh, dv, new_sp.state), event


def random_section_frame(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random orthonormal ``2n x (2n-2)`` frame spanning the section."""
    basis = section_basis(n)
    q, r = np.linalg.qr(rng.standard_normal((2 * n - 2, 2 * n - 2)))
    q = q * np.sign(np.diag(r))
    return basis @ q


def _kick(mp: MassProfile, state: PhaseState, rng: np.random.Generator) -> PhaseState:
    v = np.array(state.v) + RESTART_KICK * rng.standard_normal(mp.n)
    return normalize_to_shell(mp, state.q, v.tolist(), state.energy_target)


def estimate_spectrum(
    mp: MassProfile,
    initial: PhaseState,
    n_returns: int,
    qr_stride: int = 1,
    seed: int = 0,
    *,
    max_restarts: int = MAX_RESTARTS,
    tol_tie: float = TOL_TIE,
    burst_limit: int = BURST_LIMIT,
    burst_window: float = BURST_WINDOW,
    frame: np.ndarray | None = None,
) -> LyapunovEstimate:
    """Lyapunov spectrum of the collision return map by repeated QR.

    A random orthonormal frame of the ``2n - 2`` dimensional section is
    pushed through ``n_returns`` collisions and re-orthonormalized every
    ``qr_stride`` returns. Singular orbits are escaped by restarting from
    a slightly kicked initial velocity.
    """
    if n_returns < 1 or qr_stride < 1:
        raise ContractError("n_returns and qr_stride must be positive")
    rng = np.random.default_rng(seed)
    X0 = random_section_frame(mp.n, rng) if frame is None else np.array(frame, dtype=float)
    state = initial
    for restarts in range(max_restarts + 1):
        try:
            return _run_spectrum(
                mp, state, n_returns, qr_stride, X0.copy(), restarts,
                tol_tie=tol_tie, burst_limit=burst_limit, burst_window=burst_window,
            )
        except SingularityError:
            if restarts == max_restarts:
                raise
            state = _kick(mp, initial, rng)
    raise AssertionError("unreachable")


def _run_spectrum(mp, state, n_returns, qr_stride, X, restarts, **flow_kwargs) -> LyapunovEstimate:
    n = mp.n
    K = 2 * n - 2
    stepper = EventStepper(mp, state, **flow_kwargs)
    m1 = mp.m[0]
    gamma, c = mp.gamma, mp.c
    dh = X[:n].copy()
    dv = X[n:].copy()
    logs = np.zeros(K)
    history: list = []
    t_start = stepper.t
    for k in range(1, n_returns + 1):
        ev = stepper.step()
        s = ev.sigma
        vp = ev.v_pre
        if s == 0:
            dh, dv = floor_jump_arrays(m1, vp[0], dh, dv)
        else:
            dh, dv = pair_jump_arrays(gamma[s - 1], c[s - 1], vp[s - 1] - vp[s], s - 1, dh, dv)
        # roundoff off the energy shell is neutral and would swamp contracting directions
        dh -= dh.mean(axis=0)
        dv -= dv.mean(axis=0)
        if k % qr_stride == 0 or k == n_returns:
            Q, R = np.linalg.qr(np.vstack([dh, dv]))
            d = np.diag(R)
            logs += np.log(np.abs(d))
            Q *= np.sign(d)
            dh = Q[:n].copy()
            dv = Q[n:].copy()
        if k % HISTORY_EVERY == 0 and k % qr_stride == 0:
            history.append((k, (stepper.t - t_start) / k, sorted((logs / k).tolist(), reverse=True)))
    elapsed = stepper.t - t_start
    map_exp = np.sort(logs / n_returns)[::-1]
    tau = elapsed / n_returns
    return LyapunovEstimate(
        map_exponents=map_exp,
        flow_exponents=map_exp / tau,
        mean_return_time=tau,
        n_returns=n_returns,
        history=history,
        restarts=restarts,
        qr_stride=qr_stride,
        masses=mp.m,
    )


def is_converged(est: LyapunovEstimate, threshold: float) -> np.ndarray:
    """Per-exponent convergence flags.

    An exponent counts as converged when its running estimate stays below
    ``threshold`` in magnitude over the last half of the history, or when
    its spread over that half is below 10% of its final magnitude.
    """
    hist = est.history_flow()
    if len(hist) < 2:
        return np.zeros(len(est.flow_exponents), dtype=bool)
    tail = np.abs(hist[len(hist) // 2 :])
    spread = tail.max(axis=0) - tail.min(axis=0)
    final = np.abs(est.flow_exponents)
    stays_small = tail.max(axis=0) < threshold
    stable = spread < CONVERGENCE_OSC * final
    return stays_small | stable


def zero_exponent_count(est: LyapunovEstimate, threshold: float) -> int | None:
    """Number of flow exponents below ``threshold`` in magnitude, or ``None`` if not converged."""
    if not np.all(is_converged(est, threshold)):
        return None
    return int(np.sum(np.abs(est.flow_exponents) < threshold))


def calibration_threshold(n: int, H0: float, n_returns: int, seed: int = 0, factor: float = 3.0):
    """Zero-exponent threshold from an equal-mass run.

    Equal masses exchange labels at every pair collision, so the system
    is a set of independent bouncing balls with all exponents zero; the
    finite-run maximum ``B`` measures the estimator's resolution.
    Returns ``(factor * B, equal-mass estimate)``.
    """
    from .core_state import sample_state

    mp = MassProfile([1.0] * n)
    est = estimate_spectrum(mp, sample_state(mp, H0, seed), n_returns, seed=seed)
    return factor * float(np.abs(est.flow_exponents).max()), est


def symplectic_drift(
    mp: MassProfile,
    events: list[CollisionEvent],
    frame: np.ndarray,
    dps: int | None = None,
) -> float:
    """Relative change of all pairwise symplectic products of ``frame`` after ``events``.

    The accumulated product grows exponentially, so the pairing is carried
    in extended precision (``dps`` decimal digits, chosen from the
    double-precision growth when omitted) with the collision coefficients
    recomputed at that precision from the masses and velocities.
    """
    n = mp.n
    if dps is None:
        dh = frame[:n].copy()
        dv = frame[n:].copy()
        growth = 0.0
        for event in events:
            dh, dv = event_jump_arrays(mp, event, dh, dv)
            scale = max(np.abs(dh).max(), np.abs(dv).max())
            growth += math.log10(scale)
            dh /= scale
            dv /= scale
        dps = int(30 + 2 * max(growth, 0.0))
    with mpmath.workdps(dps):
        to_mp = np.vectorize(lambda x: mpmath.mpf(float(x)), otypes=[object])
        dh = to_mp(frame[:n])
        dv = to_mp(frame[n:])
        m = [mpmath.mpf(x) for x in mp.m]
        G0 = dh.T @ dv - dv.T @ dh
        for event in events:
            s = event.sigma
            if s == 0:
                dh, dv = floor_jump_arrays(m[0], mpmath.mpf(event.v_pre[0]), dh, dv)
            else:
                a, b = m[s - 1], m[s]
                g = (a - b) / (a + b)
                c = 2 * a * b / (a + b)
                w = mpmath.mpf(event.v_pre[s - 1]) - mpmath.mpf(event.v_pre[s])
                dh, dv = pair_jump_arrays(g, c, w, s - 1, dh, dv)
            dv = center_dv(dv)
            dh = dh - dh.sum(axis=0) / n
        G = dh.T @ dv - dv.T @ dh
        norms = [mpmath.sqrt(sum(x * x for x in frame[:, j])) for j in range(frame.shape[1])]
        worst = mpmath.mpf(0)
        for i in range(G.shape[0]):
            for j in range(G.shape[1]):
                worst = max(worst, abs(G[i, j] - G0[i, j]) / (norms[i] * norms[j]))
        return float(worst)
