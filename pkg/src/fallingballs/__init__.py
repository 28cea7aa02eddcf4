"""Falling ball model: exact event-driven flow, tangent dynamics, cones and Lyapunov spectra."""

__version__ = "0.1.0"

from .core_state import MassProfile, PhaseState, normalize_to_shell, sample_state, total_energy
from .event_flow import CollisionEvent, EventStepper, SymbolicSequence, advance, next_event
from .tangent import TangentVector, symplectic_form
from .cone import in_cone, neutral_space_h, neutral_space_v, q_form, strict_invariance_scan
from .lyapunov import estimate_spectrum, zero_exponent_count

__all__ = [
    "__version__",
    "MassProfile",
    "PhaseState",
    "normalize_to_shell",
    "sample_state",
    "total_energy",
    "CollisionEvent",
    "EventStepper",
    "SymbolicSequence",
    "advance",
    "next_event",
    "TangentVector",
    "symplectic_form",
    "in_cone",
    "neutral_space_h",
    "neutral_space_v",
    "q_form",
    "strict_invariance_scan",
    "estimate_spectrum",
    "zero_exponent_count",
]
