"""Command-line entry point.

Subcommands
-----------
``sweep SPEC``
    Monte-Carlo sweep described by a ``key = value`` file; writes
    ``sweep.csv`` plus one SVG per metric into ``--out``.
``ce-eval``
    NMSE-S / NMSE-E of the SEMRA and EMRA channel estimators only.
``single``
    One realization of every requested scheme with per-iteration traces.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness import (SCHEMES, SweepSpec, ce_eval, design_scheme, emit_outputs, format_table,
                      run_baseline, run_sweep, true_rate)
from .scenario import (ConfigError, SystemConfig, build_geometry, load_config,
                       sample_realization)

log = logging.getLogger("semra")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="system configuration file (key = value)")
    common.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    common.add_argument("--out", type=Path, default=Path("results"),
                        help="output directory (default ./results)")
    common.add_argument("--realizations", type=int, help="override the realization count")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="semra", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("sweep", parents=[common], help="run a Monte-Carlo sweep")
    p.add_argument("spec", type=Path, help="sweep specification file")
    sub.add_parser("ce-eval", parents=[common], help="channel-estimation NMSE only")
    p = sub.add_parser("single", parents=[common], help="one realization with traces")
    p.add_argument("--schemes", default=",".join(SCHEMES),
                   help="comma-separated scheme list (default: all)")
    p.add_argument("--csi", choices=("perfect", "estimated"), default="estimated")
    return parser


def _config(args) -> SystemConfig:
    return load_config(args.config) if args.config else SystemConfig()


def cmd_sweep(args) -> int:
    base = _config(args)
    spec = SweepSpec.from_text(args.spec.read_text(), base)
    if args.realizations is not None:
        spec = spec.replace(num_realizations=args.realizations)
    table = run_sweep(spec, seed=args.seed, jobs=args.jobs)
    print(format_table(table))
    if table.failures:
        print(f"quarantined realizations: {table.failures}")
    for path in emit_outputs(table, args.out):
        print(f"wrote {path}")
    return EXIT_OK


def cmd_ce_eval(args) -> int:
    config = _config(args)
    n = 100 if args.realizations is None else args.realizations
    if n < 1:
        raise ConfigError("need at least one realization")
    table = ce_eval(config, n, seed=args.seed)
    print(format_table(table))
    for path in emit_outputs(table, args.out, name="ce_eval"):
        print(f"wrote {path}")
    return EXIT_OK


def cmd_single(args) -> int:
    config = _config(args)
    schemes = [s.strip() for s in args.schemes.split(",") if s.strip()]
    bad = [s for s in schemes if s not in SCHEMES and not s.startswith("SMA-")]
    if bad:
        raise ConfigError(f"unknown schemes: {', '.join(bad)}")
    paths = sample_realization(config, args.seed)
    geometry = build_geometry(config)
    cache: dict = {}
    for scheme in schemes:
        if scheme.startswith(("TFA", "SMA")):
            print(f"{scheme} (perfect): SE {run_baseline(scheme, paths, config, geometry):.4f}")
            continue
        st, metrics = design_scheme(scheme, paths, config, args.csi, args.seed, cache=cache)
        se = true_rate(paths, config, st.alphas, st.positions, st.W)
        extra = "".join(f", {k} {v:.2f} dB" for k, v in metrics.items())
        print(f"{scheme} ({args.csi}): SE {se:.4f}{extra}")
        for rec in st.trace:
            t = " ".join(f"{k}={v * 1e3:.1f}ms" for k, v in rec.timings.items())
            print(f"  iter {rec.iteration:2d}  objective {rec.objective:12.6f}  "
                  f"R/G {rec.rate / config.num_subcarriers:9.4f}  {t}")
    return EXIT_OK


COMMANDS = {"sweep": cmd_sweep, "ce-eval": cmd_ce_eval, "single": cmd_single}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors are configuration errors; --help exits 0
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the CLI maps every failure to an exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
