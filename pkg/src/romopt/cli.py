"""Command-line entry point: ``romopt <stage> --config <path> [--stage-dir <path>]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

STAGES = ("gen-data", "build-rom", "optimize", "fom-eval", "calibrate", "update", "sample", "report")
EXIT_CONFIG = 1
_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS")


def _limit_threads():
    # must run before numpy is imported to take effect
    n = os.environ.get("ROMOPT_THREADS", "1")
    for var in _BLAS_VARS:
        os.environ.setdefault(var, n if n.isdigit() and int(n) > 0 else "1")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="romopt", description="Reduced-order control with discrepancy updates.")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--stage-dir", help="artifact directory (default: output_dir from the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .config import ConfigError, parse_config
    from .pipeline import PipelineError, run_stage

    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"romopt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        entry = run_stage(args.stage, cfg, args.stage_dir)
    except PipelineError as exc:
        print(f"romopt: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps({"stage": args.stage, "status": entry["status"], "summary": entry["summary"]}, indent=2,
                     sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
