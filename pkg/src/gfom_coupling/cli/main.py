"""``gfom-coupling`` command line: ``run``, ``verify`` and ``sweep``."""
from __future__ import annotations

import argparse
import json
import sys

from ..errors import ConfigInvalid
from .config import ENV_OUT, ENV_THREADS, PRESETS, build_config, load_config
from .runner import ExperimentAborted, run_experiment, sweep
from .verify import FAULTS, format_report, run_checks

__all__ = ["main", "build_parser"]


def _common(p):
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a shipped preset")
    p.add_argument("--seed", type=int, metavar="U64", help="base seed")
    p.add_argument("--threads", type=int, metavar="N",
                   help=f"worker threads (env {ENV_THREADS})")
    p.add_argument("--out", metavar="DIR", help=f"output directory (env {ENV_OUT})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfom-coupling", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment and write CSV/JSON artifacts")
    _common(p)
    p = sub.add_parser("verify", help="run the reduced-size property suite")
    _common(p)
    p.add_argument("--inject-fault", choices=FAULTS, help="deliberately break one invariant")
    p.add_argument("--size", type=int, default=200, help="dimension used by the suite")
    p = sub.add_parser("sweep", help="repeat an experiment over values of one config key")
    _common(p)
    p.add_argument("--param", required=True, help="config key to vary")
    p.add_argument("--values", required=True, help="comma-separated values")
    return parser


def _config(args):
    raw = load_config(args.config) if args.config else {}
    overrides = {"seed": args.seed, "threads": args.threads, "out": args.out}
    preset = args.preset
    if preset is None and not raw:
        raise ConfigInvalid([("config", "give --config or --preset")])
    return build_config(raw, preset=preset, overrides=overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            seed = args.seed
            if seed is None and (args.config or args.preset):
                seed = _config(args).seed
            if seed is None:
                seed = 0
            checks = run_checks(seed, n=args.size, fault=args.inject_fault)
            sys.stdout.write(format_report(checks))
            return 0 if all(c.passed for c in checks) else 1
        cfg = _config(args)
        if args.command == "run":
            manifest = run_experiment(cfg)
            json.dump({"status": manifest["status"], "out": cfg.out,
                       "csv_sha256": manifest["csv_sha256"]}, sys.stdout, indent=2)
            sys.stdout.write("\n")
            return 0 if manifest.get("checks_passed") in (None, True) else 1
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        for m in sweep(cfg, args.param, values):
            sys.stdout.write(f"{m['status']} {args.param}={m['config'][args.param]}\n")
        return 0
    except ConfigInvalid as exc:
        for key, msg in exc.errors:
            sys.stderr.write(f"config error [{key}]: {msg}\n")
        return 2
    except ExperimentAborted as exc:
        sys.stderr.write(f"experiment aborted: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
