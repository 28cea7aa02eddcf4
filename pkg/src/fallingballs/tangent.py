"""Linearized dynamics in energy/velocity variation coordinates.

A tangent vector is stored as ``(dh, dv)`` with ``dh_i = m_i dq_i + v_i dp_i``
and ``dv_i = dp_i / m_i``. In these coordinates free flight acts as the
identity, so the whole linearized flow is a product of collision jumps.
Vectors are kept on the energy shell (``sum(dh) == 0``) and the flow
direction ``(0; -1, ..., -1)`` is removed by shifting ``dv`` to zero mean.

The array-level helpers (``*_arrays``) accept ``(n,)`` vectors or ``(n, k)``
frames whose columns are tangent vectors; they also work on object arrays
of :mod:`mpmath` numbers when the coefficients are passed in that type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_state import MassProfile, PhaseState
from .errors import ContractError, OracleUnreliableError
from .event_flow import CollisionEvent, advance

SHELL_TOL = 1e-10
H_FD = 1e-6


@dataclass(frozen=True, eq=False)
class TangentVector:
    dh: np.ndarray
    dv: np.ndarray

    def __post_init__(self):
        dh = np.array(self.dh, dtype=float)
        dv = np.array(self.dv, dtype=float)
        if dh.shape != dv.shape or dh.ndim != 1:
            raise ContractError(f"dh and dv must be vectors of equal length, got {dh.shape} and {dv.shape}")
        dh.flags.writeable = False
        dv.flags.writeable = False
        object.__setattr__(self, "dh", dh)
        object.__setattr__(self, "dv", dv)

    @property
    def n(self) -> int:
        return self.dh.shape[0]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.dh, self.dv])

    @classmethod
    def from_stacked(cls, x) -> "TangentVector":
        x = np.asarray(x, dtype=float)
        n = x.shape[0] // 2
        return cls(x[:n], x[n:])

    def norm(self) -> float:
        return float(math.sqrt(np.dot(self.dh, self.dh) + np.dot(self.dv, self.dv)))

    def __add__(self, other: "TangentVector") -> "TangentVector":
        return TangentVector(self.dh + other.dh, self.dv + other.dv)

    def __sub__(self, other: "TangentVector") -> "TangentVector":
        return TangentVector(self.dh - other.dh, self.dv - other.dv)

    def __mul__(self, s: float) -> "TangentVector":
        return TangentVector(s * self.dh, s * self.dv)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if not isinstance(other, TangentVector):
            return NotImplemented
        return bool(np.array_equal(self.dh, other.dh) and np.array_equal(self.dv, other.dv))

    __hash__ = None

    def to_dict(self) -> dict:
        return {"dh": self.dh.tolist(), "dv": self.dv.tolist()}


@dataclass(frozen=True)
class TangentFrame:
    """Columns ``dh[:, k], dv[:, k]`` are tangent vectors at ``state``."""

    dh: np.ndarray
    dv: np.ndarray
    state: PhaseState

    @property
    def k(self) -> int:
        return self.dh.shape[1]

    def column(self, k: int) -> TangentVector:
        return TangentVector(self.dh[:, k], self.dv[:, k])

    def stacked(self) -> np.ndarray:
        return np.vstack([self.dh, self.dv])

    def min_singular_value(self) -> float:
        return float(np.linalg.svd(self.stacked(), compute_uv=False).min())

    def to_dict(self) -> dict:
        return {"dh": self.dh.tolist(), "dv": self.dv.tolist(), "state": self.state.to_dict()}


def symplectic_form(u: TangentVector, w: TangentVector) -> float:
    """``sum(u.dh * w.dv - u.dv * w.dh)``."""
    return float(np.dot(u.dh, w.dv) - np.dot(u.dv, w.dh))


def symplectic_gram(dh: np.ndarray, dv: np.ndarray) -> np.ndarray:
    """Matrix of pairwise symplectic products of the columns of a frame."""
    return dh.T @ dv - dv.T @ dh


def section_basis(n: int) -> np.ndarray:
    """Orthonormal basis (as ``2n x (2n-2)`` columns) of ``sum(dh) = sum(dv) = 0``."""
    centered = np.eye(n) - 1.0 / n
    u, s, _ = np.linalg.svd(centered)
    half = u[:, : n - 1]
    basis = np.zeros((2 * n, 2 * n - 2))
    basis[:n, : n - 1] = half
    basis[n:, n - 1 :] = half
    return basis


def from_qp(mp: MassProfile, state: PhaseState, dq, dp, tol: float = SHELL_TOL) -> TangentVector:
    """Convert a ``(dq, dp)`` variation to ``(dh, dv)`` and project to the section."""
    dq = np.asarray(dq, dtype=float)
    dp = np.asarray(dp, dtype=float)
    m = mp.masses
    v = np.array(state.v)
    if dq.shape != (mp.n,) or dp.shape != (mp.n,):
        raise ContractError("variation has the wrong length")
    dh = m * dq + v * dp
    scale = max(1.0, float(np.abs(m * dq).max()), float(np.abs(v * dp).max()))
    if abs(dh.sum()) > tol * scale:
        raise ContractError(f"variation leaves the energy shell: sum(dh) = {dh.sum():.3e}")
    return project_to_section(TangentVector(dh, dp / m))


def to_qp(mp: MassProfile, state: PhaseState, tv: TangentVector) -> tuple[np.ndarray, np.ndarray]:
    m = mp.masses
    v = np.array(state.v)
    return tv.dh / m - v * tv.dv, m * tv.dv


def transport_flight(tv: TangentVector, dt: float) -> TangentVector:
    """Free flight does not change ``(dh, dv)``."""
    return tv


def project_to_section(tv: TangentVector) -> TangentVector:
    """Remove the flow-direction component by giving ``dv`` zero mean."""
    return TangentVector(tv.dh, tv.dv - tv.dv.mean())


def r_matrix(mp: MassProfile, i: int) -> np.ndarray:
    """Velocity transformation of an ``(i, i+1)`` collision, ``1 <= i <= n-1``."""
    if not 1 <= i <= mp.n - 1:
        raise IndexError(f"pair index {i} out of range 1..{mp.n - 1}")
    g = mp.gamma[i - 1]
    R = np.eye(mp.n)
    a, b = i - 1, i
    R[a, a], R[a, b] = g, 1.0 - g
    R[b, a], R[b, b] = 1.0 + g, -g
    return R


def pair_jump_arrays(g, c, w, a: int, dh: np.ndarray, dv: np.ndarray):
    """Pair-collision jump of particles ``a, a+1`` (0-based); returns new arrays.

    ``dv -> R dv`` and ``dh -> R^T dh`` plus ``g c w (dv_b - dv_a)`` added to
    component ``a`` and subtracted from ``b``; ``w`` is the approach speed.
    No projection is applied here.
    """
    b = a + 1
    dh = dh.copy()
    dv = dv.copy()
    # copies: rows of 2-D frames are views
    xa, xb = dv[a].copy(), dv[b].copy()
    ha, hb = dh[a].copy(), dh[b].copy()
    shear = g * c * w * (xb - xa)
    dv[a] = g * xa + (1 - g) * xb
    dv[b] = (1 + g) * xa - g * xb
    dh[a] = g * ha + (1 + g) * hb + shear
    dh[b] = (1 - g) * ha - g * hb - shear
    return dh, dv


def floor_jump_arrays(m1, v1, dh: np.ndarray, dv: np.ndarray):
    """Floor-bounce jump for incoming velocity ``v1 < 0``; ``dh`` is unchanged."""
    dv = dv.copy()
    dv[0] = dv[0] - 2 * dh[0] / (m1 * v1)
    return dh.copy(), dv


def center_dv(dv: np.ndarray) -> np.ndarray:
    return dv - dv.sum(axis=0) / dv.shape[0]


def _pair_precondition(mp: MassProfile, state_pre: PhaseState, i: int) -> float:
    if not 1 <= i <= mp.n - 1:
        raise ContractError(f"pair index {i} out of range 1..{mp.n - 1}")
    q, v = state_pre.q, state_pre.v
    if abs(q[i] - q[i - 1]) > 1e-9 * max(1.0, abs(q[i])):
        raise ContractError(f"particles {i} and {i + 1} are not in contact")
    w = v[i - 1] - v[i]
    if not w > 0:
        raise ContractError(f"particles {i} and {i + 1} are not approaching (w = {w})")
    return w


def jump_pair(mp: MassProfile, state_pre: PhaseState, i: int, tv: TangentVector) -> TangentVector:
    """Tangent map across an ``(i, i+1)`` collision (1-based ``i``)."""
    w = _pair_precondition(mp, state_pre, i)
    dh, dv = pair_jump_arrays(mp.gamma[i - 1], mp.c[i - 1], w, i - 1, tv.dh, tv.dv)
    return project_to_section(TangentVector(dh, dv))


def jump_floor(mp: MassProfile, state_pre: PhaseState, tv: TangentVector) -> TangentVector:
    """Tangent map across a floor bounce of the lowest particle."""
    q1, v1 = state_pre.q[0], state_pre.v[0]
    if abs(q1) > 1e-9 or not v1 < 0:
        raise ContractError(f"not a floor collision: q_1 = {q1}, v_1 = {v1}")
    dh, dv = floor_jump_arrays(mp.m[0], v1, tv.dh, tv.dv)
    return project_to_section(TangentVector(dh, dv))


def event_jump_arrays(mp: MassProfile, event: CollisionEvent, dh: np.ndarray, dv: np.ndarray):
    """Apply the jump of a recorded event to a vector or frame, then project."""
    s = event.sigma
    if s == 0:
        dh, dv = floor_jump_arrays(mp.m[0], event.v_pre[0], dh, dv)
    else:
        w = event.v_pre[s - 1] - event.v_pre[s]
        dh, dv = pair_jump_arrays(mp.gamma[s - 1], mp.c[s - 1], w, s - 1, dh, dv)
    return dh, center_dv(dv)


def event_jump(mp: MassProfile, event: CollisionEvent, tv: TangentVector) -> TangentVector:
    state_pre = event.pre_state()
    if event.sigma == 0:
        return jump_floor(mp, state_pre, tv)
    return jump_pair(mp, state_pre, event.sigma, tv)


def jump_matrix(mp: MassProfile, event: CollisionEvent) -> np.ndarray:
    """The projected jump of ``event`` as a ``2n x 2n`` matrix on stacked ``(dh, dv)``."""
    n = mp.n
    eye = np.eye(2 * n)
    dh, dv = event_jump_arrays(mp, event, eye[:n], eye[n:])
    return np.vstack([dh, dv])


def segment_tangent_map(mp: MassProfile, events) -> np.ndarray:
    """Product of the jump matrices of ``events`` (earliest applied first)."""
    M = np.eye(2 * mp.n)
    for event in events:
        M = jump_matrix(mp, event) @ M
    return M


def norm_equivalence_constant(mp: MassProfile, H0: float = 1.0) -> float:
    """A constant ``K`` with ``1/K <= |(dq, dp)| / |(dh, dv)| <= K`` on the shell ``H = H0``.

    Both coordinate changes are block triangular; each block norm is
    bounded using ``|v_i| <= sqrt(2 H0 / m_i)``.
    """
    m = np.array(mp.m)
    vmax = float(np.sqrt(2.0 * H0 / m).max())
    return float(m.max() + 1.0 / m.min() + vmax)


def _flow_qv(mp: MassProfile, q, v, T: float):
    from .core_state import total_energy

    H = total_energy(mp, q, v)
    state = PhaseState(tuple(q), tuple(v), H if H > 0 else 1.0)
    result = advance(mp, state, max_time=T, record=False)
    return np.array(result.state.q), np.array(result.state.v), result.sequence.sigmas


def _central_difference(mp, q0, v0, dq, dvel, T, h, sigmas_ref):
    qp, vp, sp = _flow_qv(mp, q0 + h * dq, v0 + h * dvel, T)
    qm, vm, sm = _flow_qv(mp, q0 - h * dq, v0 - h * dvel, T)
    if sp != sigmas_ref or sm != sigmas_ref:
        raise OracleUnreliableError(
            f"collision sequence changed under a perturbation of size {h:.1e}"
        )
    return (qp - qm) / (2 * h), (vp - vm) / (2 * h)


def fd_oracle(
    mp: MassProfile,
    state: PhaseState,
    tv: TangentVector,
    T: float,
    h_fd: float = H_FD,
    tol: float = 1e-5,
) -> TangentVector:
    """Central finite difference of the time-``T`` flow, in ``(dh, dv)`` at the end point.

    The step is ``h_fd`` relative to the state scale. The result is
    rejected when halving the step moves it by more than ``10 * tol``
    (relative), or when a perturbed orbit has a different collision
    sequence.
    """
    q0 = np.array(state.q)
    v0 = np.array(state.v)
    dq, dp = to_qp(mp, state, tv)
    dvel = dp / mp.masses
    size = math.sqrt(float(dq @ dq + dvel @ dvel))
    if size == 0.0:
        return TangentVector(np.zeros(mp.n), np.zeros(mp.n))
    scale = max(1.0, float(np.abs(q0).max()), float(np.abs(v0).max()))
    h = h_fd * scale / size
    end = advance(mp, state, max_time=T, record=False)
    ref = end.sequence.sigmas
    d1 = _central_difference(mp, q0, v0, dq, dvel, T, h, ref)
    d2 = _central_difference(mp, q0, v0, dq, dvel, T, h / 2, ref)
    y1 = np.concatenate(d1)
    y2 = np.concatenate(d2)
    if np.linalg.norm(y1 - y2) > 10 * tol * max(np.linalg.norm(y2), 1e-300):
        raise OracleUnreliableError("finite difference did not stabilise under step halving")
    dq_T, dv_T = d1
    return from_qp(mp, end.state, dq_T, mp.masses * dv_T, tol=1e-6)
