"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the
terminal summary) or ``python tests/test_acceptance.py``.
"""

import functools
import json
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from _oracles import jump_vs_oracle, random_section_vector  # noqa: E402
from _report import record  # noqa: E402
from fallingballs.config import ExperimentConfig  # noqa: E402
from fallingballs.cone import (  # noqa: E402
    first_floor_index,
    neutral_dimension_curve,
    neutral_invariant_checks,
    neutral_space_h,
    restrict_to_velocity_complement,
    strict_invariance_scan,
    track_q,
)
from fallingballs.core_state import MassProfile, is_degenerate, normalize_to_shell, sample_state  # noqa: E402
from fallingballs.errors import AccumulationGuardError  # noqa: E402
from fallingballs.event_flow import advance  # noqa: E402
from fallingballs.experiments import degenerate_state, run_experiment  # noqa: E402
from fallingballs.lyapunov import estimate_spectrum, random_section_frame, symplectic_drift, zero_exponent_count  # noqa: E402

pytestmark = pytest.mark.slow


# 1. energy, ordering and per-collision conservation

def _conservation_errors(mp, events):
    sig = np.array([e.sigma for e in events])
    Q = np.array([e.q for e in events])
    A = np.array([e.v_pre for e in events])
    B = np.array([e.v_post for e in events])
    ordered = bool((np.diff(Q, axis=1) >= 0).all() and (Q[:, 0] >= 0).all())
    idx = np.nonzero(sig > 0)[0]
    if len(idx) == 0:
        return ordered, 0.0, 0.0
    a = sig[idx] - 1
    m = mp.masses
    ma, mb = m[a], m[a + 1]
    va, vb, wa, wb = A[idx, a], A[idx, a + 1], B[idx, a], B[idx, a + 1]
    p_err = np.abs((ma * va + mb * vb) - (ma * wa + mb * wb)) / (ma * np.abs(va) + mb * np.abs(vb))
    k_pre = ma * va**2 + mb * vb**2
    k_err = np.abs(k_pre - (ma * wa**2 + mb * wb**2)) / k_pre
    return ordered, float(p_err.max()), float(k_err.max())


def test_criterion_01_conservation_and_ordering():
    rng = np.random.default_rng(101)
    worst_h = worst_p = worst_k = 0.0
    bad_order = 0
    for n in (2, 3, 5):
        for _ in range(20):
            mp = MassProfile(rng.uniform(0.5, 3.0, n))
            res = advance(mp, sample_state(mp, 1.0, rng), max_events=100_000)
            ordered, p, k = _conservation_errors(mp, res.diagnostics.events)
            bad_order += not ordered
            worst_h = max(worst_h, res.diagnostics.max_energy_drift)
            worst_p, worst_k = max(worst_p, p), max(worst_k, k)
    ok = worst_h <= 1e-9 and bad_order == 0 and worst_p <= 1e-13 and worst_k <= 1e-13
    detail = f"max|H-1|={worst_h:.2e}, ordering violations={bad_order}, momentum={worst_p:.2e}, KE={worst_k:.2e}"
    assert record(1, "energy/ordering/pair conservation over 60 x 1e5 events", ok, detail), detail


# 2. analytic jumps against the finite-difference oracle

JUMP_CASES = {
    "pair+": [(3, 2, 1), (2, 1), (5, 4, 3, 2, 1)],
    "pair0": [(1, 1, 1), (2, 2, 1), (1, 1)],
    "floor": [(2, 1), (3, 2, 1), (1, 2)],
}


def test_criterion_02_jumps_match_oracle():
    parts, ok = [], True
    for kind, profiles in JUMP_CASES.items():
        errs, skipped, seed = [], 0, 0
        while len(errs) < 100 and seed < 1000:
            mp = MassProfile(profiles[seed % len(profiles)])
            e = jump_vs_oracle(mp, seed, kind)
            seed += 1
            if e is None:
                skipped += 1
            else:
                errs.append(e)
        worst = max(errs) if errs else float("inf")
        ok &= len(errs) == 100 and worst <= 1e-5
        parts.append(f"{kind}: {len(errs)} configs max rel err {worst:.1e} ({skipped} skipped)")
    detail = "; ".join(parts)
    assert record(2, "tangent jumps vs finite differences", ok, detail), detail


# 3. symplectic pairing of the cocycle

def test_criterion_03_symplectic_drift():
    rng = np.random.default_rng(303)
    worst = 0.0
    for masses in [(3, 2, 1), (1, 3, 2), (2, 2, 1), (1, 1, 1), tuple(rng.uniform(0.5, 3.0, 3))]:
        mp = MassProfile(masses)
        events = advance(mp, sample_state(mp, 1.0, rng), max_events=1000).diagnostics.events
        worst = max(worst, symplectic_drift(mp, events, random_section_frame(3, rng)))
    detail = f"max relative drift after 1e3 returns = {worst:.2e} (tol 1e-6)"
    assert record(3, "symplectic form preserved", worst <= 1e-6, detail), detail


# 4. monotone Q for nonincreasing masses, with a negative control

MONOTONE_PROFILES = [(3, 2, 1), (2, 2, 1), (1, 1, 1), (5, 4, 3, 2, 1), (2, 1)]


def test_criterion_04_q_monotone():
    rng = np.random.default_rng(404)
    min_delta, worst_pred = np.inf, 0.0
    for j in range(20):
        mp = MassProfile(MONOTONE_PROFILES[j % len(MONOTONE_PROFILES)])
        events = advance(mp, sample_state(mp, 1.0, rng), max_events=10_000).diagnostics.events
        r = track_q(mp, events, random_section_vector(mp.n, rng))
        min_delta = min(min_delta, r.min_delta)
        worst_pred = max(worst_pred, r.max_prediction_error())
    mp = MassProfile([1, 2])
    events = advance(mp, sample_state(mp, 1.0, 0), max_events=10_000).diagnostics.events
    control = track_q(mp, events, random_section_vector(2, rng))
    ok = min_delta >= -1e-12 and worst_pred <= 1e-10 and control.min_delta < 0
    detail = (
        f"min dQ={min_delta:.2e}, max prediction err={worst_pred:.2e}, "
        f"control (1,2) min dQ={control.min_delta:.2e} with {len(control.negative_events)} negative jumps"
    )
    assert record(4, "Q nondecreasing at every collision", ok, detail), detail


# 5. neutral subspaces collapse

def test_criterion_05_neutral_dimension_zero():
    mp = MassProfile([3, 2, 1])
    rng = np.random.default_rng(505)
    reached, monotone = 0, True
    for _ in range(50):
        events = advance(mp, sample_state(mp, 1.0, rng), max_events=200).diagnostics.events
        curve = neutral_dimension_curve(mp, events)
        reached += curve[-1][1:] == (0, 0)
        monotone &= all(h1 <= h0 and v1 <= v0 for (_, h0, v0), (_, h1, v1) in zip(curve, curve[1:]))
    ok = reached >= 49 and monotone
    detail = f"{reached}/50 points reach dim 0 within 200 events, curves nonincreasing={monotone}"
    assert record(5, "neutral subspace dimensions reach zero", ok, detail), detail


# 6. invariants of neutral vectors on floor-free segments

def _floor_free_segments(mp, count, rng, min_pairs=2):
    out = []
    while len(out) < count:
        state = sample_state(mp, 1.0, rng)
        events = advance(mp, state, max_events=40).diagnostics.events
        k = first_floor_index(events)
        if k >= min_pairs:
            out.append((state, events[:k]))
    return out


def test_criterion_06_neutral_invariants():
    rng = np.random.default_rng(606)
    total = failed = 0
    for masses in [(3, 2, 1), (5, 4, 3, 2, 1)]:
        mp = MassProfile(masses)
        for state, seg in _floor_free_segments(mp, 20, rng):
            B = restrict_to_velocity_complement(neutral_space_h(mp, seg), state.v)
            checks = neutral_invariant_checks(mp, state, seg, B)
            total += len(checks)
            failed += sum(not c.passed for c in checks)
    ok = total > 0 and failed == 0
    detail = f"{total - failed}/{total} neutral basis vectors satisfy all invariants on 40 floor-free segments (n=3, n=5)"
    assert record(6, "neutral vector invariants", ok, detail), detail


# 7 and 8. Lyapunov spectra

@functools.lru_cache(maxsize=None)
def _spectrum(masses, frame_seed):
    mp = MassProfile(masses)
    return estimate_spectrum(mp, sample_state(mp, 1.0, 0), 100_000, seed=frame_seed)


def test_criterion_07_spectrum_pairing_and_frames():
    parts, ok = [], True
    for masses in [(2, 1), (3, 2, 1)]:
        a, b = _spectrum(masses, 0), _spectrum(masses, 1)
        lam = np.abs(a.flow_exponents).max()
        pair_ok = a.flow_pairing_defect <= 5e-3 * lam and b.flow_pairing_defect <= 5e-3 * lam
        gap = np.abs(a.flow_exponents - b.flow_exponents).max()
        tol = max(a.convergence_error().max(), b.convergence_error().max())
        ok &= bool(pair_ok and gap <= tol)
        parts.append(
            f"{masses}: pairing {max(a.flow_pairing_defect, b.flow_pairing_defect) / lam:.1e} of max|lambda|, "
            f"frame gap {gap:.1e} vs tol {tol:.1e}"
        )
    detail = "; ".join(parts)
    assert record(7, "spectrum pairing and frame independence", ok, detail), detail


def test_criterion_08_zero_exponent_calibration():
    calib = _spectrum((1, 1, 1), 0)
    B = float(np.abs(calib.flow_exponents).max())
    est = _spectrum((3, 2, 1), 0)
    lam_min = float(np.abs(est.flow_exponents).min())
    thr = 3 * B
    z_uneq, z_eq = zero_exponent_count(est, thr), zero_exponent_count(calib, thr)
    ok = lam_min >= 10 * B and z_uneq == 0 and z_eq == 4
    detail = f"B={B:.2e}, min|lambda|(3,2,1)={lam_min:.3f} ({lam_min / B:.0f} B), zero counts {z_uneq} and {z_eq}"
    assert record(8, "exponents separated from calibrated zero", ok, detail), detail


# 9. strict cone entry

def test_criterion_09_strict_entry():
    rng = np.random.default_rng(909)
    mp = MassProfile([3, 2, 1])
    entered = sum(strict_invariance_scan(mp, sample_state(mp, 1.0, rng), 500).entered for _ in range(100))
    eq = MassProfile([1, 1, 1])
    dv_entries = 0
    for _ in range(20):
        scan = strict_invariance_scan(eq, sample_state(eq, 1.0, rng), 500)
        dv_entries += sum(r.strict_entry_event is not None for r in scan.reports if r.label.startswith("dv"))
    ok = entered == 100 and dv_entries == 0
    detail = f"entry fraction {entered / 100:.2f} within 500 events; equal-mass dv entries {dv_entries}"
    assert record(9, "strict invariance of the cone", ok, detail), detail


# 10. degenerate orbits and the accumulation guard

def _stuck_state(mp, k, rng):
    q = np.concatenate([np.zeros(k), np.sort(rng.uniform(0.1, 1.0, mp.n - k))])
    v = np.concatenate([np.zeros(k), rng.standard_normal(mp.n - k)])
    return normalize_to_shell(mp, q.tolist(), v.tolist(), 1.0)


def test_criterion_10_degenerate_and_guard():
    rng = np.random.default_rng(1010)
    misdetected = 0
    for n in range(2, 6):
        mp = MassProfile(rng.uniform(0.5, 3.0, n))
        for k in range(1, n):
            misdetected += is_degenerate(mp, _stuck_state(mp, k, rng)) != (True, k)
        misdetected += is_degenerate(mp, sample_state(mp, 1.0, rng))[0]
        q = [0.0] + sorted(rng.uniform(0.1, 1.0, n - 1))
        misdetected += is_degenerate(mp, normalize_to_shell(mp, q, [0.5] + [0.0] * (n - 1)))[0]
    guard_times, monotone = [], True
    for masses, stuck in [((3, 2, 1), 1), ((3, 2, 1), 2), ((2, 1, 1, 1), 1)]:
        mp = MassProfile(masses)
        cfg = ExperimentConfig(mode="degenerate-demo", masses=masses, stuck=stuck, perturb=1e-8, seed=3)
        state = degenerate_state(cfg, mp)
        t0 = time.perf_counter()
        try:
            advance(mp, state, max_events=10**7, record=False)
            guard_times.append(np.inf)
        except AccumulationGuardError as exc:
            guard_times.append(time.perf_counter() - t0)
            osc = np.array(exc.diagnostic["tail_oscillation"])
            monotone &= bool(np.all(np.diff(osc) <= 0) and osc[-1] < osc[0])
    ok = misdetected == 0 and max(guard_times) < 10 and monotone
    detail = (
        f"{misdetected} misdetected states, guard fired after {max(guard_times):.2f} s max, "
        f"tail oscillation decreasing={monotone}"
    )
    assert record(10, "degenerate detection and accumulation guard", ok, detail), detail


# 11. deterministic outputs

DETERMINISM_CONFIGS = [
    dict(mode="simulate", masses=(3, 2, 1), max_events=2000),
    dict(mode="lyapunov", masses=(2, 1), n_returns=3000),
    dict(mode="cone", masses=(3, 2, 1), n_points=5, horizon=200),
    dict(mode="neutral", masses=(3, 2, 1), n_points=5, segment_length=100),
    dict(mode="sweep", masses=(1, 1, 1), sweep_ratios=(2.0,), sweep_profiles=((1, 1, 1),), n_returns=1000, workers=2),
    dict(mode="degenerate-demo", masses=(2, 1, 1), stuck=1, max_events=500),
]


def _snapshot(out: Path) -> dict:
    files = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    manifest = json.loads(files.pop("manifest.json"))
    manifest.pop("wall_time_s")
    files["manifest.json"] = json.dumps(manifest, sort_keys=True).encode()
    return files


def test_criterion_11_deterministic_outputs(tmp_path):
    differing = []
    for kwargs in DETERMINISM_CONFIGS:
        out = tmp_path / kwargs["mode"]
        cfg = ExperimentConfig(seed=7, output_dir=str(out), **kwargs)
        run_experiment(cfg)
        first = _snapshot(out)
        shutil.rmtree(out)
        run_experiment(cfg)
        second = _snapshot(out)
        if first != second:
            differing.append(kwargs["mode"])
    ok = not differing
    detail = f"{len(DETERMINISM_CONFIGS)} subcommands rerun, differing outputs: {differing or 'none'}"
    assert record(11, "byte-identical reruns", ok, detail), detail


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
