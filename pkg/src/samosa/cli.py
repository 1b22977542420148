"""Command line entry point: ``samosa run|validate|analyze``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import __version__
from .analysis import analyze_run
from .config import load_config, validate_config
from .errors import SamosaError
from .pipeline import run_pipeline
from .vmdriver import Backend, load_scenario, synthetic_scenario

log = logging.getLogger("samosa")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FAILED = 1


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    problems = validate_config(cfg)
    for v in problems:
        print(f"{v.field}: {v.rule}: {v.message}")
    if problems:
        return EXIT_INVALID
    print(f"{args.config}: ok")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    problems = validate_config(cfg)
    if problems:
        for v in problems:
            print(f"{v.field}: {v.rule}: {v.message}", file=sys.stderr)
        return EXIT_INVALID
    backend = Backend(args.backend)
    scenario = None
    if backend is Backend.MOCK:
        scenario = load_scenario(args.scenario, cfg) if args.scenario else synthetic_scenario(cfg)
    elif args.scenario:
        log.warning("--scenario only applies to the mock backend; ignored")
    manifest = run_pipeline(cfg, backend, scenario)
    print(f"{cfg.output_dir}/{manifest.run_id}")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    report = analyze_run(args.run_dir, top_k=args.top_k, window_ms=args.window_ms)
    top = ", ".join(f"{r.syscall}={r.count}" for r in report.syscalls.ranked[:5])
    print(f"{args.run_dir}: {len(report.net.bins)} network bins, top syscalls: {top or 'none'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="samosa", description="Multi-architecture side-channel sandbox.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute a binary in the sandbox")
    r.add_argument("config")
    r.add_argument("--backend", choices=[b.value for b in Backend], default=Backend.QEMU.value)
    r.add_argument("--scenario", help="mock scenario TOML (mock backend only)")
    r.add_argument("--out", help="override the output directory")
    r.set_defaults(func=_cmd_run)

    v = sub.add_parser("validate", help="check a run configuration")
    v.add_argument("config")
    v.set_defaults(func=_cmd_validate)

    a = sub.add_parser("analyze", help="post-process a run directory")
    a.add_argument("run_dir")
    a.add_argument("--top-k", type=int, default=15)
    a.add_argument("--window-ms", type=int, default=1)
    a.set_defaults(func=_cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "top_k", 1) < 1 or getattr(args, "window_ms", 1) < 1:
        print("error: --top-k and --window-ms must be positive", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except SamosaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
