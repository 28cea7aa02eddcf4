"""The quadratic form ``Q = <dh, dv>``, its cone, and neutral subspaces of orbit segments."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import null_space

from .core_state import MassProfile, PhaseState
from .errors import ContractError
from .event_flow import CollisionEvent, SymbolicSequence, advance
from .tangent import TangentVector, event_jump_arrays, r_matrix, section_basis

CONE_BAND = 1e-12
STRICT_BAND = 1e-10
RANK_RCOND = 1e-10

INTERIOR = "interior"
BOUNDARY = "boundary"
OUTSIDE = "outside"


def q_form(tv: TangentVector) -> float:
    return float(np.dot(tv.dh, tv.dv))


def in_cone(tv: TangentVector, band: float = CONE_BAND) -> str:
    """Classify ``tv`` against the cone ``Q >= 0`` with a relative boundary band."""
    q = q_form(tv)
    size = float(np.dot(tv.dh, tv.dh) + np.dot(tv.dv, tv.dv))
    if abs(q) <= band * size:
        return BOUNDARY
    return INTERIOR if q > 0 else OUTSIDE


def q_jump_pair_delta(mp: MassProfile, i: int, w: float, tv_pre: TangentVector) -> float:
    """Change of ``Q`` across an ``(i, i+1)`` collision with approach speed ``w``."""
    if not w > 0:
        raise ContractError(f"approach speed must be positive, got {w}")
    gap = tv_pre.dv[i] - tv_pre.dv[i - 1]
    return mp.gamma[i - 1] * mp.c[i - 1] * w * gap * gap


def q_jump_floor_delta(mp: MassProfile, v1_pre: float, tv_pre: TangentVector) -> float:
    """Change of ``Q`` across a floor bounce with incoming velocity ``v1_pre < 0``."""
    if not v1_pre < 0:
        raise ContractError(f"incoming floor velocity must be negative, got {v1_pre}")
    h1 = tv_pre.dh[0]
    return -2.0 * h1 * h1 / (mp.m[0] * v1_pre)


def predicted_delta(mp: MassProfile, event: CollisionEvent, tv_pre: TangentVector) -> float:
    if event.sigma == 0:
        return q_jump_floor_delta(mp, event.v_pre[0], tv_pre)
    s = event.sigma
    return q_jump_pair_delta(mp, s, event.v_pre[s - 1] - event.v_pre[s], tv_pre)


@dataclass
class ConeReport:
    """Evolution of ``Q`` along one tracked vector.

    The vector is rescaled to unit norm before every collision, so each
    entry of ``per_event_deltas`` is the change of ``Q`` for a unit
    incoming vector; signs and entry times are unaffected by the scaling.
    """

    label: str
    q_initial: float
    q_final: float
    per_event_deltas: list[tuple[int, float]] = field(default_factory=list)
    predicted_deltas: list[float] = field(default_factory=list)
    strict_entry_event: int | None = None

    @property
    def min_delta(self) -> float:
        return min((d for _, d in self.per_event_deltas), default=0.0)

    @property
    def negative_events(self) -> list[tuple[int, float]]:
        return [(k, d) for k, d in self.per_event_deltas if d < 0]

    def max_prediction_error(self) -> float:
        """Largest mismatch between measured and closed-form deltas, relative to ``max(1, |predicted|)``."""
        errs = [
            abs(d - p) / max(1.0, abs(p))
            for (_, d), p in zip(self.per_event_deltas, self.predicted_deltas)
        ]
        return max(errs, default=0.0)

    def to_dict(self, with_deltas: bool = True) -> dict:
        out = {
            "label": self.label,
            "q_initial": self.q_initial,
            "q_final": self.q_final,
            "strict_entry_event": self.strict_entry_event,
            "min_delta": self.min_delta,
            "n_negative_deltas": len(self.negative_events),
        }
        if with_deltas:
            out["per_event_deltas"] = [[k, d] for k, d in self.per_event_deltas]
        return out


def track_q(
    mp: MassProfile,
    events: Sequence[CollisionEvent],
    tv: TangentVector,
    label: str = "",
    band: float = STRICT_BAND,
    renormalize: bool = True,
) -> ConeReport:
    """Push ``tv`` through ``events`` and record every change of ``Q``.

    With ``renormalize=False`` the vector keeps its scale, so that
    ``q_final - q_initial`` equals the sum of the recorded deltas; only
    use this on segments short enough not to overflow. An initially
    interior vector gets ``strict_entry_event = -1``.
    """
    dh = np.array(tv.dh, dtype=float)
    dv = np.array(tv.dv, dtype=float)
    report = ConeReport(label, q_form(tv), q_form(tv))
    size = np.sqrt(dh @ dh + dv @ dv)
    if size > 0 and dh @ dv > band * size * size:
        report.strict_entry_event = -1
    for k, event in enumerate(events):
        size = np.sqrt(dh @ dh + dv @ dv)
        if size == 0.0:
            report.per_event_deltas.append((k, 0.0))
            report.predicted_deltas.append(0.0)
            continue
        if renormalize:
            dh /= size
            dv /= size
        before = TangentVector(dh, dv)
        q_before = float(dh @ dv)
        dh, dv = event_jump_arrays(mp, event, dh, dv)
        dh -= dh.mean()
        q_after = float(dh @ dv)
        report.per_event_deltas.append((k, q_after - q_before))
        report.predicted_deltas.append(predicted_delta(mp, event, before))
        norm2 = dh @ dh + dv @ dv
        if report.strict_entry_event is None and q_after > band * norm2:
            report.strict_entry_event = k
    if renormalize:
        size = np.sqrt(dh @ dh + dv @ dv)
        report.q_final = float(dh @ dv) / (size * size) if size > 0 else 0.0
    else:
        report.q_final = float(dh @ dv)
    return report


def boundary_directions(n: int) -> list[tuple[str, TangentVector]]:
    """Orthonormal pure-``dh`` and pure-``dv`` directions spanning the section."""
    basis = section_basis(n)
    out = []
    for j in range(n - 1):
        out.append((f"dh{j + 1}", TangentVector(basis[:n, j], basis[n:, j])))
    for j in range(n - 1, 2 * n - 2):
        out.append((f"dv{j - n + 2}", TangentVector(basis[:n, j], basis[n:, j])))
    return out


@dataclass
class ScanResult:
    reports: list[ConeReport]
    uniform_entry: dict[str, int | None]
    horizon: int

    @property
    def strict_entry_event(self) -> int | None:
        """First event after which every tracked direction has ``Q > 0``; ``None`` if never."""
        entries = [r.strict_entry_event for r in self.reports]
        if any(e is None for e in entries):
            return None
        return max(entries)

    @property
    def entered(self) -> bool:
        return self.strict_entry_event is not None

    def to_dict(self, with_deltas: bool = False) -> dict:
        return {
            "horizon": self.horizon,
            "strict_entry_event": self.strict_entry_event,
            "uniform_entry": self.uniform_entry,
            "directions": [r.to_dict(with_deltas) for r in self.reports],
        }


def _uniform_entry(mp: MassProfile, events, cols: np.ndarray, band: float) -> int | None:
    """First event after which ``Q`` is positive on the whole span of ``cols``.

    ``cols`` is a ``2n x k`` block; positivity on the span means the
    symmetrised Gram matrix ``sym(H^T V)`` of the images is positive definite.
    """
    n = mp.n
    dh = cols[:n].copy()
    dv = cols[n:].copy()
    for k, event in enumerate(events):
        dh, dv = event_jump_arrays(mp, event, dh, dv)
        dh -= dh.mean(axis=0)
        scale = np.sqrt((dh * dh).sum(axis=0) + (dv * dv).sum(axis=0))
        dh /= scale
        dv /= scale
        G = dh.T @ dv
        if np.linalg.eigvalsh(0.5 * (G + G.T)).min() > band:
            return k
    return None


def strict_invariance_scan(
    mp: MassProfile,
    state: PhaseState,
    horizon: int,
    band: float = STRICT_BAND,
    events: Sequence[CollisionEvent] | None = None,
) -> ScanResult:
    """Track the pure-``dh`` and pure-``dv`` directions for ``horizon`` collisions.

    Besides per-direction entry into the open cone, ``uniform_entry``
    reports when ``Q`` becomes positive on the entire pure-``dh`` and
    pure-``dv`` subspaces.
    """
    if events is None:
        events = advance(mp, state, max_events=horizon).diagnostics.events
    events = list(events)[:horizon]
    reports = [track_q(mp, events, tv, label, band) for label, tv in boundary_directions(mp.n)]
    basis = section_basis(mp.n)
    n = mp.n
    uniform = {
        "dh": _uniform_entry(mp, events, basis[:, : n - 1], band),
        "dv": _uniform_entry(mp, events, basis[:, n - 1 :], band),
    }
    return ScanResult(reports, uniform, horizon)


# -- neutral subspaces -----------------------------------------------------


def _sigmas(segment) -> tuple[int, ...]:
    if isinstance(segment, SymbolicSequence):
        return segment.sigmas
    seg = list(segment)
    if seg and isinstance(seg[0], CollisionEvent):
        return tuple(e.sigma for e in seg)
    return tuple(int(s) for s in seg)


def _null_basis(rows: list[np.ndarray], n: int) -> np.ndarray:
    if not rows:
        return np.eye(n)
    return null_space(np.array(rows), rcond=RANK_RCOND)


def _rank(rows: list[np.ndarray]) -> int:
    s = np.linalg.svd(np.array(rows), compute_uv=False)
    return int(np.sum(s > RANK_RCOND * s[0]))


class _NeutralH:
    """Incremental constraints on initial ``dh`` keeping ``dv == 0`` through a segment."""

    def __init__(self, mp: MassProfile):
        self.mp = mp
        n = mp.n
        self.P = np.eye(n)  # maps initial dh to the current dh
        self.rows = [np.ones(n) / np.sqrt(n)]
        self.transposes = [None] + [_rt(mp, i) for i in range(1, n)]

    def push(self, sigma: int) -> bool:
        if sigma == 0:
            row = self.P[0]
            norm = np.linalg.norm(row)
            if norm > 0:
                self.rows.append(row / norm)
            return True
        self.P = self.transposes[sigma] @ self.P
        big = np.abs(self.P).max()
        if big > 1e100:
            self.P /= big
        return False


class _NeutralV:
    """Incremental constraints on initial ``dv`` keeping ``Q == 0`` for pure ``dv`` vectors."""

    def __init__(self, mp: MassProfile):
        self.mp = mp
        n = mp.n
        self.perm = list(range(n))  # current component j carries initial component perm[j]
        self.rows = [np.ones(n) / np.sqrt(n)]

    def push(self, sigma: int) -> bool:
        if sigma == 0:
            return False
        a, b = sigma - 1, sigma
        if self.mp.gamma[a] == 0.0:
            self.perm[a], self.perm[b] = self.perm[b], self.perm[a]
            return False
        row = np.zeros(self.mp.n)
        row[self.perm[a]] += 1.0
        row[self.perm[b]] -= 1.0
        self.rows.append(row / np.sqrt(2.0))
        return True


def _rt(mp: MassProfile, i: int) -> np.ndarray:
    return r_matrix(mp, i).T


def neutral_space_h(mp: MassProfile, segment) -> np.ndarray:
    """Orthonormal basis (columns) of initial ``dh`` whose pure-``dh`` images keep ``Q == 0``.

    Depends only on the collision types: ``dh`` is carried by ``R^T`` at
    pair collisions and must have a vanishing first component at every
    floor bounce.
    """
    acc = _NeutralH(mp)
    for s in _sigmas(segment):
        acc.push(s)
    return _null_basis(acc.rows, mp.n)


def neutral_space_v(mp: MassProfile, segment) -> np.ndarray:
    """Orthonormal basis (columns) of initial ``dv`` whose pure-``dv`` images keep ``Q == 0``.

    Equal-mass collisions swap components; any other pair collision
    requires the two colliding components to agree; floor bounces leave
    pure ``dv`` vectors alone.
    """
    acc = _NeutralV(mp)
    for s in _sigmas(segment):
        acc.push(s)
    return _null_basis(acc.rows, mp.n)


def neutral_dimension_curve(mp: MassProfile, segment) -> list[tuple[int, int, int]]:
    """``(k, dim_h, dim_v)`` for the first ``k`` collisions, ``k = 0 .. len(segment)``."""
    sigmas = _sigmas(segment)
    h = _NeutralH(mp)
    v = _NeutralV(mp)
    dim_h = dim_v = mp.n - 1
    curve = [(0, dim_h, dim_v)]
    for k, s in enumerate(sigmas, start=1):
        if h.push(s) and dim_h > 0:
            dim_h = mp.n - _rank(h.rows)
        if v.push(s) and dim_v > 0:
            dim_v = mp.n - _rank(v.rows)
        curve.append((k, dim_h, dim_v))
    return curve


@dataclass
class NeutralSpaceCertificate:
    segment: SymbolicSequence
    basis_h: np.ndarray
    basis_v: np.ndarray

    @property
    def dim_h(self) -> int:
        return self.basis_h.shape[1]

    @property
    def dim_v(self) -> int:
        return self.basis_v.shape[1]

    def to_dict(self) -> dict:
        return {
            "segment": {"sigmas": list(self.segment.sigmas), "times": list(self.segment.times)},
            "dim_h": self.dim_h,
            "dim_v": self.dim_v,
            "basis_h": self.basis_h.T.tolist(),
            "basis_v": self.basis_v.T.tolist(),
        }


def neutral_certificate(mp: MassProfile, events: Sequence[CollisionEvent]) -> NeutralSpaceCertificate:
    seq = SymbolicSequence.from_events(events)
    return NeutralSpaceCertificate(seq, neutral_space_h(mp, seq), neutral_space_v(mp, seq))


def restrict_to_velocity_complement(basis: np.ndarray, v0: Iterable[float]) -> np.ndarray:
    """Vectors of ``span(basis)`` orthogonal to the velocity ``v0``.

    Any vector neutral along the whole forward orbit lies in this part.
    """
    v0 = np.asarray(list(v0), dtype=float)
    if basis.shape[1] == 0:
        return basis
    coeffs = null_space((v0 @ basis)[None, :], rcond=RANK_RCOND)
    return basis @ coeffs


@dataclass
class NeutralCheck:
    max_velocity_pairing: float
    linear_fit_residual: float
    weighted_norm_drift: float
    tol_pairing: float = 1e-10
    tol_fit: float = 1e-9
    tol_norm: float = 1e-12

    @property
    def passed(self) -> bool:
        return (
            self.max_velocity_pairing <= self.tol_pairing
            and self.linear_fit_residual <= self.tol_fit
            and self.weighted_norm_drift <= self.tol_norm
        )

    def to_dict(self) -> dict:
        return {
            "max_velocity_pairing": self.max_velocity_pairing,
            "linear_fit_residual": self.linear_fit_residual,
            "weighted_norm_drift": self.weighted_norm_drift,
            "passed": self.passed,
        }


def neutral_invariant_checks(
    mp: MassProfile,
    initial: PhaseState,
    events: Sequence[CollisionEvent],
    basis_h: np.ndarray,
) -> list[NeutralCheck]:
    """Check the invariants of pure-``dh`` neutral vectors along a recorded segment.

    For each basis column: ``<dh(t), v(t)>`` stays zero at every collision,
    ``w(t) = <q(t), dh(t)>`` is a single linear function of time, and
    ``sum(dh_i^2 / m_i)`` is constant. An empty basis passes vacuously.
    """
    m = np.array(mp.m)
    out = []
    for j in range(basis_h.shape[1]):
        dh = np.array(basis_h[:, j], dtype=float)
        pairing = [abs(dh @ np.array(initial.v))]
        times = [0.0]
        ws = [float(np.array(initial.q) @ dh)]
        norm0 = float(dh @ (dh / m))
        drift = 0.0
        for event in events:
            pairing.append(abs(dh @ np.array(event.v_pre)))
            if event.sigma > 0:
                dh = _rt(mp, event.sigma) @ dh
            pairing.append(abs(dh @ np.array(event.v_post)))
            times.append(event.t)
            ws.append(float(np.array(event.q) @ dh))
            drift = max(drift, abs(float(dh @ (dh / m)) - norm0))
        if len(times) >= 2:
            coef = np.polyfit(times, ws, 1)
            resid = float(np.abs(np.polyval(coef, times) - np.array(ws)).max())
        else:
            resid = 0.0
        out.append(NeutralCheck(max(pairing), resid, drift))
    return out


def first_floor_index(events: Sequence[CollisionEvent]) -> int:
    """Number of collisions before the first floor bounce."""
    for k, e in enumerate(events):
        if e.sigma == 0:
            return k
    return len(events)
