"""Experiment runners behind the command line.

Every run writes its outputs into ``config.output_dir`` together with a
``manifest.json`` that echoes the configuration and records SHA-256
digests of all outputs. Apart from the manifest's wall time and
environment fields, outputs depend only on the configuration and the
package version.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .cone import (
    first_floor_index,
    neutral_certificate,
    neutral_dimension_curve,
    neutral_invariant_checks,
    restrict_to_velocity_complement,
    strict_invariance_scan,
)
from .config import ExperimentConfig
from .core_state import (
    MassProfile,
    PhaseState,
    is_degenerate,
    normalize_to_shell,
    sample_state,
    total_energy,
    validate_state,
)
from .errors import (
    AccumulationGuardError,
    ConfigError,
    DegenerateStateError,
    FallingBallsError,
    InvalidConfigurationError,
    SingularityError,
)
from .event_flow import EventStepper, advance
from .lyapunov import LyapunovEstimate, estimate_spectrum, is_converged, zero_exponent_count

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_SINGULARITY = 3
EXIT_GUARD = 4
EXIT_INCONCLUSIVE = 5
EXIT_DEGENERATE = 6

MANIFEST = "manifest.json"


class Inconclusive(FallingBallsError):
    """A spectrum did not converge well enough to count zero exponents."""


# -- serialization -------------------------------------------------------


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def fmt(x: Any) -> str:
    """CSV cell text; floats use ``repr`` so they round-trip exactly."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Run:
    config: ExperimentConfig
    out: Path
    outputs: list[str] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def path(self, name: str) -> Path:
        if name not in self.outputs:
            self.outputs.append(name)
        return self.out / name

    def write_json(self, name: str, obj: Any) -> None:
        self.path(name).write_text(dumps(obj))

    def write_csv(self, name: str, header: list[str], rows) -> None:
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(x) for x in row])


@dataclass
class RunResult:
    exit_code: int
    manifest: dict
    out: Path

    @property
    def status(self) -> str:
        return self.manifest["status"]


# -- shared helpers ------------------------------------------------------


def point_seeds(seed: int, count: int) -> list[int]:
    """Independent per-point seeds derived from the master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def initial_state(cfg: ExperimentConfig, mp: MassProfile, seed: int | None = None) -> PhaseState:
    if cfg.initial_q is not None:
        if cfg.normalize:
            return normalize_to_shell(mp, cfg.initial_q, cfg.initial_v, cfg.H0)
        state = PhaseState(cfg.initial_q, cfg.initial_v, cfg.H0)
        validate_state(mp, state, cfg.energy_tol)
        return state
    return sample_state(mp, cfg.H0, cfg.seed if seed is None else seed)


def sample_points(cfg: ExperimentConfig, mp: MassProfile) -> list[tuple[int, PhaseState]]:
    if cfg.initial_q is not None:
        return [(cfg.seed, initial_state(cfg, mp))]
    return [(s, sample_state(mp, cfg.H0, s)) for s in point_seeds(cfg.seed, cfg.n_points)]


def flow_kwargs(cfg: ExperimentConfig) -> dict:
    return {"tol_tie": cfg.tol_tie, "burst_limit": cfg.burst_limit, "burst_window": cfg.burst_window}


def _event_header(n: int) -> list[str]:
    return ["t", "sigma"] + [f"q_{i + 1}" for i in range(n)] + [f"v_{i + 1}" for i in range(n)]


def stream_events(run: Run, mp: MassProfile, state: PhaseState, frozen: int = 0) -> dict:
    """Evolve ``state`` and write every event as it happens; returns flow diagnostics."""
    cfg = run.config
    stepper = EventStepper(mp, state, frozen=frozen, track_energy=True, **flow_kwargs(cfg))
    jsonl = cfg.event_format == "jsonl"
    name = "events.jsonl" if jsonl else "events.csv"

    def diag() -> dict:
        return {
            "n_events": stepper.n_events,
            "t_final": stepper.t,
            "max_burst": stepper.max_burst,
            "max_energy_drift": stepper.max_energy_drift,
            "final_state": stepper.state.to_dict(),
        }

    with open(run.path(name), "w", newline="") as fh:
        w = None if jsonl else csv.writer(fh, lineterminator="\n")
        if w is not None:
            w.writerow(_event_header(mp.n))
        try:
            while stepper.n_events < cfg.max_events:
                if cfg.max_time is not None:
                    dt, _ = stepper.peek()
                    if stepper.t + dt > cfg.max_time:
                        stepper.fly(cfg.max_time - stepper.t)
                        break
                e = stepper.step()
                if jsonl:
                    fh.write(json.dumps({"t": e.t, "sigma": e.sigma, "q": list(e.q), "v": list(e.v_post)}) + "\n")
                else:
                    w.writerow([fmt(e.t), e.sigma] + [fmt(x) for x in e.q] + [fmt(x) for x in e.v_post])
        finally:
            run.diagnostics["flow"] = diag()
    return diag()


# -- modes ---------------------------------------------------------------


def run_simulate(run: Run) -> int:
    cfg = run.config
    mp = MassProfile(cfg.masses)
    state = initial_state(cfg, mp)
    degenerate, k = is_degenerate(mp, state)
    if degenerate:
        raise DegenerateStateError(
            f"initial state has {k} particle(s) resting on the floor; use the degenerate-demo mode", k
        )
    run.diagnostics["initial_state"] = state.to_dict()
    stream_events(run, mp, state)
    return EXIT_OK


def _history_rows(est: LyapunovEstimate):
    flow = est.history_flow()
    for (k, tau, lam), fl in zip(est.history, flow):
        yield [k, tau] + list(lam) + list(fl)


def calibrate(cfg: ExperimentConfig, n: int) -> tuple[float, LyapunovEstimate]:
    """Equal-mass run of the same size; its largest |flow exponent| is the resolution ``B``."""
    mp = MassProfile([1.0] * n)
    returns = cfg.calibration_returns or cfg.n_returns
    est = estimate_spectrum(
        mp, sample_state(mp, cfg.H0, cfg.seed), returns, cfg.qr_stride, cfg.seed, **flow_kwargs(cfg)
    )
    return float(np.abs(est.flow_exponents).max()), est


def spectrum_summary(est: LyapunovEstimate, threshold: float) -> dict:
    count = zero_exponent_count(est, threshold)
    return {
        "estimate": est.to_dict(),
        "convergence_error": est.convergence_error(),
        "converged": is_converged(est, threshold),
        "zero_exponent_count": count if count is not None else "inconclusive",
        "min_abs_flow_exponent": float(np.abs(est.flow_exponents).min()),
        "max_abs_flow_exponent": float(np.abs(est.flow_exponents).max()),
    }


def run_lyapunov(run: Run) -> int:
    cfg = run.config
    mp = MassProfile(cfg.masses)
    state = initial_state(cfg, mp)
    est = estimate_spectrum(mp, state, cfg.n_returns, cfg.qr_stride, cfg.seed, **flow_kwargs(cfg))
    equal = len(set(mp.m)) == 1
    calib = None
    if cfg.zero_threshold is not None:
        threshold = cfg.zero_threshold
        rule = {"kind": "fixed", "threshold": threshold}
    else:
        if equal and cfg.initial_q is None and not cfg.calibration_returns:
            B, calib = float(np.abs(est.flow_exponents).max()), est
        else:
            B, calib = calibrate(cfg, mp.n)
        threshold = cfg.calibration_factor * B
        rule = {
            "kind": "equal-mass calibration",
            "factor": cfg.calibration_factor,
            "calibration_max_abs_flow_exponent": B,
            "threshold": threshold,
        }
    summary = spectrum_summary(est, threshold)
    summary["threshold_rule"] = rule
    summary["initial_state"] = state.to_dict()
    run.write_json("spectrum.json", summary)
    K = len(est.map_exponents)
    header = ["returns", "mean_return_time"] + [f"map_{j + 1}" for j in range(K)] + [f"flow_{j + 1}" for j in range(K)]
    run.write_csv("history.csv", header, _history_rows(est))
    if calib is not None:
        B = rule["calibration_max_abs_flow_exponent"]
        run.write_json(
            "comparison.json",
            {
                "calibration_masses": [1.0] * mp.n,
                "calibration_flow_exponents": calib.flow_exponents,
                "calibration_max_abs": B,
                "masses": list(mp.m),
                "min_abs_flow_exponent": summary["min_abs_flow_exponent"],
                "separation_ratio": summary["min_abs_flow_exponent"] / B if B > 0 else math.inf,
            },
        )
    run.diagnostics["restarts"] = est.restarts
    run.diagnostics["zero_exponent_count"] = summary["zero_exponent_count"]
    if summary["zero_exponent_count"] == "inconclusive":
        raise Inconclusive("running exponents did not settle within the convergence rule")
    return EXIT_OK


def run_cone(run: Run) -> int:
    cfg = run.config
    mp = MassProfile(cfg.masses)
    points = []
    entered = dv_entered = 0
    min_delta = math.inf
    n_negative = 0
    for seed, state in sample_points(cfg, mp):
        events = advance(mp, state, max_events=cfg.horizon, **flow_kwargs(cfg)).diagnostics.events
        scan = strict_invariance_scan(mp, state, cfg.horizon, cfg.strict_band, events=events)
        dv_reports = [r for r in scan.reports if r.label.startswith("dv")]
        dv_ok = all(r.strict_entry_event is not None for r in dv_reports)
        entered += scan.entered
        dv_entered += dv_ok
        for r in scan.reports:
            min_delta = min(min_delta, r.min_delta)
            n_negative += len(r.negative_events)
        rec = scan.to_dict(with_deltas=cfg.cone_deltas)
        rec["seed"] = seed
        rec["dv_entered"] = dv_ok
        points.append(rec)
    total = len(points)
    summary = {
        "masses": list(mp.m),
        "ordering_class": mp.ordering_class,
        "n_points": total,
        "horizon": cfg.horizon,
        "entry_fraction": entered / total,
        "dv_entry_fraction": dv_entered / total,
        "min_delta_q": min_delta,
        "n_negative_deltas": n_negative,
    }
    run.write_json("cone.json", {"summary": summary, "points": points})
    run.diagnostics["cone"] = summary
    return EXIT_OK


def run_neutral(run: Run) -> int:
    cfg = run.config
    mp = MassProfile(cfg.masses)
    certs = []
    curve_rows = []
    collapsed = 0
    monotone = True
    for idx, (seed, state) in enumerate(sample_points(cfg, mp)):
        events = advance(mp, state, max_events=cfg.segment_length, **flow_kwargs(cfg)).diagnostics.events
        cert = neutral_certificate(mp, events)
        curve = neutral_dimension_curve(mp, events)
        for k, dh, dv in curve:
            curve_rows.append([idx, seed, k, dh, dv])
        monotone &= all(curve[j + 1][1] <= curve[j][1] and curve[j + 1][2] <= curve[j][2] for j in range(len(curve) - 1))
        zero_at = next((k for k, dh, dv in curve if dh == 0 and dv == 0), None)
        collapsed += zero_at is not None
        # floor-free prefix: a nontrivial neutral space on which the invariants can be checked
        k0 = first_floor_index(events)
        prefix = events[:k0]
        basis = restrict_to_velocity_complement(neutral_certificate(mp, prefix).basis_h, state.v)
        checks = neutral_invariant_checks(mp, state, prefix, basis)
        rec = cert.to_dict()
        rec.update(
            seed=seed,
            collapse_event=zero_at,
            floor_free_prefix=k0,
            prefix_checks=[c.to_dict() for c in checks],
        )
        certs.append(rec)
    summary = {
        "masses": list(mp.m),
        "n_points": len(certs),
        "segment_length": cfg.segment_length,
        "collapsed_fraction": collapsed / len(certs),
        "curves_nonincreasing": monotone,
    }
    run.write_json("neutral.json", {"summary": summary, "points": certs})
    run.write_csv("dimension_curve.csv", ["point", "seed", "events", "dim_h", "dim_v"], curve_rows)
    run.diagnostics["neutral"] = summary
    return EXIT_OK


def sweep_profiles(cfg: ExperimentConfig) -> list[tuple[float, ...]]:
    """Explicit profiles first, then one geometric profile ``m_i = r**(n - i)`` per ratio."""
    profiles = [tuple(p) for p in cfg.sweep_profiles]
    n = cfg.n
    for r in cfg.sweep_ratios:
        profiles.append(tuple(float(r ** (n - 1 - i)) for i in range(n)))
    return profiles or [tuple(cfg.masses)]


def _sweep_point(args) -> dict:
    cfg, masses, seed, threshold = args
    mp = MassProfile(masses)
    row = {
        "masses": " ".join(fmt(m) for m in masses),
        "n": mp.n,
        "ordering_class": mp.ordering_class,
        "unordered": mp.ordering_class == "unordered",
        "seed": seed,
        "threshold": threshold,
    }
    try:
        est = estimate_spectrum(mp, sample_state(mp, cfg.H0, seed), cfg.n_returns, cfg.qr_stride, seed, **flow_kwargs(cfg))
        count = zero_exponent_count(est, threshold)
        row.update(
            status="ok" if count is not None else "inconclusive",
            min_abs_flow=float(np.abs(est.flow_exponents).min()),
            max_abs_flow=float(np.abs(est.flow_exponents).max()),
            zero_count=count,
            pairing_defect=est.flow_pairing_defect,
            mean_return_time=est.mean_return_time,
            restarts=est.restarts,
            error="",
        )
    except FallingBallsError as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


SWEEP_COLUMNS = [
    "point", "masses", "n", "ordering_class", "unordered", "seed", "status", "min_abs_flow",
    "max_abs_flow", "zero_count", "threshold", "pairing_defect", "mean_return_time", "restarts", "error",
]


def run_sweep(run: Run) -> int:
    cfg = run.config
    profiles = sweep_profiles(cfg)
    seeds = point_seeds(cfg.seed, len(profiles))
    thresholds = {}
    for n in sorted({len(p) for p in profiles}):
        if cfg.zero_threshold is not None:
            thresholds[n] = cfg.zero_threshold
        else:
            thresholds[n] = cfg.calibration_factor * calibrate(cfg, n)[0]
    jobs = [(cfg, p, s, thresholds[len(p)]) for p, s in zip(profiles, seeds)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    for i, row in enumerate(rows):
        row["point"] = i
    run.write_csv("sweep.csv", SWEEP_COLUMNS, ([row.get(c) for c in SWEEP_COLUMNS] for row in rows))
    run.diagnostics["sweep"] = {
        "points": len(rows),
        "failed": sum(r["status"] == "failed" for r in rows),
        "inconclusive": sum(r["status"] == "inconclusive" for r in rows),
        "thresholds": {str(k): v for k, v in thresholds.items()},
    }
    return EXIT_OK


def degenerate_state(cfg: ExperimentConfig, mp: MassProfile) -> PhaseState:
    """Bottom ``stuck`` particles at rest on the floor, the rest sampled, all on the shell.

    A positive ``perturb`` kicks the resting velocities, giving a
    near-degenerate state.
    """
    if cfg.initial_q is not None:
        return initial_state(cfg, mp)
    k = cfg.stuck
    if not 1 <= k < mp.n:
        raise ConfigError(f"stuck must be between 1 and {mp.n - 1}", "stuck")
    rng = np.random.default_rng(cfg.seed)
    q = np.concatenate([np.zeros(k), np.sort(rng.uniform(0.0, 1.0, mp.n - k))])
    v = np.concatenate([np.zeros(k), rng.standard_normal(mp.n - k)])
    state = normalize_to_shell(mp, q.tolist(), v.tolist(), cfg.H0)
    if cfg.perturb:
        v = np.array(state.v)
        v[:k] += cfg.perturb * rng.standard_normal(k)
        state = normalize_to_shell(mp, state.q, v.tolist(), cfg.H0)
    return state


def run_degenerate_demo(run: Run) -> int:
    cfg = run.config
    mp = MassProfile(cfg.masses)
    state = degenerate_state(cfg, mp)
    degenerate, k = is_degenerate(mp, state)
    run.diagnostics["initial_state"] = state.to_dict()
    run.diagnostics["degenerate"] = {"detected": degenerate, "k": k}
    stream_events(run, mp, state, frozen=k if degenerate else 0)
    return EXIT_OK


MODES: dict[str, Callable[[Run], int]] = {
    "simulate": run_simulate,
    "lyapunov": run_lyapunov,
    "cone": run_cone,
    "neutral": run_neutral,
    "sweep": run_sweep,
    "degenerate-demo": run_degenerate_demo,
}


def _guard_summary(exc: AccumulationGuardError) -> dict:
    osc = exc.diagnostic.get("tail_oscillation", [])
    return {
        "t": exc.t,
        "burst_size": exc.diagnostic.get("burst_size"),
        "tail_oscillation_first": osc[0] if osc else None,
        "tail_oscillation_last": osc[-1] if osc else None,
        "tail_oscillation_decreasing": bool(osc) and osc[-1] < osc[0],
    }


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run ``cfg.mode`` and always write the manifest, also on failure."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out)
    start = time.perf_counter()
    status, error = "ok", None
    try:
        code = MODES[cfg.mode](run)
    except Inconclusive as exc:
        code, status, error = EXIT_INCONCLUSIVE, "inconclusive", str(exc)
    except SingularityError as exc:
        code, status, error = EXIT_SINGULARITY, "singularity", str(exc)
        run.diagnostics["singularity"] = {"t": exc.t, "sigmas": list(exc.sigmas)}
    except AccumulationGuardError as exc:
        code, status, error = EXIT_GUARD, "guard", str(exc)
        run.diagnostics["guard"] = _guard_summary(exc)
        run.write_json("guard.json", {"t": exc.t, **exc.diagnostic})
    except DegenerateStateError as exc:
        code, status, error = EXIT_DEGENERATE, "degenerate", str(exc)
        run.diagnostics["degenerate"] = {"detected": True, "k": exc.k}
    except (ConfigError, InvalidConfigurationError) as exc:
        code, status, error = EXIT_CONFIG, "config-error", str(exc)
    except Exception as exc:  # recorded, then surfaced through the exit status
        code, status, error = EXIT_ERROR, "error", f"{type(exc).__name__}: {exc}"
        run.diagnostics["traceback"] = traceback.format_exc()
    manifest = {
        "artifact_version": __version__,
        "mode": cfg.mode,
        "config": cfg.to_dict(),
        "status": status,
        "exit_code": code,
        "error": error,
        "diagnostics": run.diagnostics,
        "outputs": {
            name: {"sha256": sha256_file(out / name), "bytes": (out / name).stat().st_size}
            for name in sorted(run.outputs)
        },
        "wall_time_s": time.perf_counter() - start,
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
    }
    (out / MANIFEST).write_text(dumps(manifest))
    return RunResult(code, manifest, out)


def write_config_error_manifest(output_dir: str, exc: ConfigError) -> Path:
    """Manifest for a configuration that could not even be parsed."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "artifact_version": __version__,
        "status": "config-error",
        "exit_code": EXIT_CONFIG,
        "error": str(exc),
        "field": exc.field,
        "line": exc.line,
        "outputs": {},
    }
    (out / MANIFEST).write_text(dumps(manifest))
    return out / MANIFEST
