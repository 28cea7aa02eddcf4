"""Command line entry point: ``fallingballs <mode> [--config FILE] [overrides]``."""

from __future__ import annotations

import argparse
import sys

from .config import MODES, load_config
from .errors import ConfigError
from .experiments import EXIT_CONFIG, run_experiment, write_config_error_manifest

# convenience flags; anything else goes through --set key=value
_FLAGS = {
    "masses": "comma separated masses, bottom to top",
    "seed": "master seed",
    "H0": "energy level",
    "max_events": "event budget (simulate, degenerate-demo)",
    "max_time": "time budget (simulate, degenerate-demo)",
    "n_returns": "returns for spectrum estimates",
    "qr_stride": "returns between re-orthonormalizations",
    "n_points": "sampled points (cone, neutral)",
    "horizon": "event horizon (cone)",
    "segment_length": "segment length (neutral)",
    "output_dir": "directory for outputs and manifest",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fallingballs",
        description="Falling ball simulations, tangent dynamics, cones and Lyapunov spectra.",
    )
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", "-c", help="INI style config file")
        for name, help_text in _FLAGS.items():
            p.add_argument("--" + name.replace("_", "-"), dest=name, help=help_text)
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override any config field (repeatable)",
        )
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict[str, str]:
    over = {"mode": args.mode}
    for name in _FLAGS:
        val = getattr(args, name)
        if val is not None:
            over[name] = val
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}", key)
        over[key.strip()] = value
    return over


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides_from_args(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        write_config_error_manifest(args.output_dir or "out", exc)
        return EXIT_CONFIG
    result = run_experiment(cfg)
    m = result.manifest
    line = f"{cfg.mode}: {m['status']} (exit {result.exit_code}); outputs in {result.out}"
    print(line if m["error"] is None else f"{line}\n  {m['error']}", file=sys.stderr if result.exit_code else sys.stdout)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
