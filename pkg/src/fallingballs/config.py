"""Plain-text experiment configuration.

The file is INI style with a single ``[experiment]`` section (the header
may be omitted). Lists are comma separated; mass profiles in a sweep are
separated by semicolons::

    mode = lyapunov
    masses = 3, 2, 1
    seed = 7
    n_returns = 100000
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .core_state import ENERGY_TOL, MassProfile
from .errors import ConfigError, FallingBallsError
from .event_flow import BURST_LIMIT, BURST_WINDOW, TOL_TIE
from .cone import STRICT_BAND

MODES = ("simulate", "lyapunov", "cone", "neutral", "sweep", "degenerate-demo")
SECTION = "experiment"


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _profiles(text: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_floats(chunk) for chunk in text.split(";") if chunk.strip())


def _optional(conv):
    def parse(text: str):
        if text.strip().lower() in ("", "none"):
            return None
        return conv(text)

    return parse


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    mode: str = "simulate"
    masses: tuple[float, ...] = (1.0, 1.0)
    H0: float = 1.0
    seed: int = 0
    # explicit initial state; sampled on the shell from the seed when absent
    initial_q: tuple[float, ...] | None = None
    initial_v: tuple[float, ...] | None = None
    normalize: bool = False

    max_events: int = 1000
    max_time: float | None = None
    n_returns: int = 10_000
    qr_stride: int = 1
    n_points: int = 1
    horizon: int = 500
    segment_length: int = 200

    zero_threshold: float | None = None
    calibration_factor: float = 3.0
    calibration_returns: int | None = None

    sweep_ratios: tuple[float, ...] = ()
    sweep_profiles: tuple[tuple[float, ...], ...] = ()
    workers: int = 1

    # degenerate-demo: number of particles resting on the floor and an optional velocity kick
    stuck: int = 1
    perturb: float = 0.0

    energy_tol: float = ENERGY_TOL
    tol_tie: float = TOL_TIE
    burst_limit: int = BURST_LIMIT
    burst_window: float = BURST_WINDOW
    strict_band: float = STRICT_BAND

    output_dir: str = "out"
    event_format: str = "csv"
    cone_deltas: bool = False

    _TOLERANCES = ("energy_tol", "tol_tie", "burst_window", "strict_band", "calibration_factor")

    def __post_init__(self):
        # identical output whether built in code or parsed from text
        self.masses = tuple(float(x) for x in self.masses)
        self.sweep_ratios = tuple(float(x) for x in self.sweep_ratios)
        self.sweep_profiles = tuple(tuple(float(x) for x in p) for p in self.sweep_profiles)
        if self.initial_q is not None:
            self.initial_q = tuple(float(x) for x in self.initial_q)
        if self.initial_v is not None:
            self.initial_v = tuple(float(x) for x in self.initial_v)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}", "mode")
        try:
            MassProfile(self.masses)
        except FallingBallsError as exc:
            raise ConfigError(str(exc), "masses") from None
        for name in self._TOLERANCES:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive", name)
        if not self.H0 > 0:
            raise ConfigError("H0 must be positive", "H0")
        for name in ("burst_limit", "n_returns", "qr_stride", "n_points", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1", name)
        for name in ("max_events", "horizon", "segment_length", "stuck"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative", name)
        if self.max_time is not None and self.max_time < 0:
            raise ConfigError("max_time must be nonnegative", "max_time")
        if self.zero_threshold is not None and not self.zero_threshold > 0:
            raise ConfigError("zero_threshold must be positive", "zero_threshold")
        if (self.initial_q is None) != (self.initial_v is None):
            raise ConfigError("initial_q and initial_v must be given together", "initial_q")
        n = len(self.masses)
        if self.initial_q is not None and (len(self.initial_q) != n or len(self.initial_v) != n):
            raise ConfigError(f"initial state must have {n} positions and velocities", "initial_q")
        if self.event_format not in ("csv", "jsonl"):
            raise ConfigError("event_format must be csv or jsonl", "event_format")
        for prof in self.sweep_profiles:
            try:
                MassProfile(prof)
            except FallingBallsError as exc:
                raise ConfigError(str(exc), "sweep_profiles") from None
        if any(not r > 0 for r in self.sweep_ratios):
            raise ConfigError("sweep ratios must be positive", "sweep_ratios")

    @property
    def n(self) -> int:
        return len(self.masses)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = [list(x) if isinstance(x, tuple) else x for x in val]
            out[f.name] = val
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_PARSERS: dict[str, Any] = {
    "mode": str.strip,
    "masses": _floats,
    "H0": float,
    "seed": int,
    "initial_q": _optional(_floats),
    "initial_v": _optional(_floats),
    "normalize": _bool,
    "max_events": int,
    "max_time": _optional(float),
    "n_returns": int,
    "qr_stride": int,
    "n_points": int,
    "horizon": int,
    "segment_length": int,
    "zero_threshold": _optional(float),
    "calibration_factor": float,
    "calibration_returns": _optional(int),
    "sweep_ratios": _floats,
    "sweep_profiles": _profiles,
    "workers": int,
    "stuck": int,
    "perturb": float,
    "energy_tol": float,
    "tol_tie": float,
    "burst_limit": int,
    "burst_window": float,
    "strict_band": float,
    "output_dir": str.strip,
    "event_format": str.strip,
    "cone_deltas": _bool,
}

# configparser lowercases keys
_KEYS = {k.lower(): k for k in _PARSERS}


def parse_value(key: str, text: str, line: int | None = None) -> tuple[str, Any]:
    name = _KEYS.get(key.strip().lower().replace("-", "_"))
    if name is None:
        raise ConfigError(f"unknown key {key!r}", key, line)
    try:
        return name, _PARSERS[name](text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r}: {exc}", name, line) from None


def _key_lines(text: str) -> dict[str, int]:
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*([A-Za-z0-9_\-]+)\s*[=:]", raw)
        if m:
            lines.setdefault(m.group(1).lower(), lineno)
    return lines


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse configuration text, then apply string ``overrides`` (e.g. from the command line)."""
    offset = 0
    if not re.search(r"^\s*\[", text, flags=re.M):
        text = f"[{SECTION}]\n" + text
        offset = 1
    lines = {k: v - offset for k, v in _key_lines(text).items()}
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"malformed config: {exc.message if hasattr(exc, 'message') else exc}",
                          None, line - offset if line else None) from None
    extra = [s for s in parser.sections() if s != SECTION]
    if extra:
        raise ConfigError(f"unexpected section(s) {extra}; use [{SECTION}]")
    values: dict[str, Any] = {}
    if parser.has_section(SECTION):
        for key, raw in parser.items(SECTION):
            name, val = parse_value(key, raw, lines.get(key))
            values[name] = val
    for key, raw in (overrides or {}).items():
        name, val = parse_value(key, raw)
        values[name] = val
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        if exc.line is None and exc.field is not None:
            raise ConfigError(exc.message, exc.field,
                              lines.get(exc.field.lower())) from None
        raise


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
    return parse_config_text(text, overrides)
