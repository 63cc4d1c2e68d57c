"""``lab`` command: run presets or YAML experiment files and export CSV artifacts."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config, parse_seeds
from .experiments import PRESETS, load_preset, preset_text, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("oampi_lab")


def _seeds_arg(text: str) -> list[int]:
    try:
        return parse_seeds(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lab", description="Tabular offline policy iteration laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seeds", type=_seeds_arg, help="seed list such as 0..19 or 0,3,7 (ranges inclusive)")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--threads", type=int, help="worker threads (default: LAB_THREADS or CPU count)")

    p = sub.add_parser("preset", parents=[common], help="run a built-in experiment")
    p.add_argument("name", choices=PRESETS)
    p.add_argument("--print-config", action="store_true", help="print the preset's YAML and exit")

    r = sub.add_parser("run", parents=[common], help="run an experiment file")
    r.add_argument("--config", required=True, help="YAML experiment file")

    v = sub.add_parser("validate", help="check an experiment file without running it")
    v.add_argument("--config", required=True, help="YAML experiment file")
    return parser


def _execute(cfg, args) -> int:
    out = args.out or cfg.output.dir
    result = run_experiment(cfg, out, seeds=args.seeds, threads=args.threads)
    print(f"{cfg.name}: {len(result.files)} files written to {out} (config {result.config_hash})")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            cfg = load_config(args.config)
            print(f"ok: {args.config} ({cfg.name}, config {cfg.config_hash()})")
            return EXIT_OK
        if args.command == "preset":
            if args.print_config:
                sys.stdout.write(preset_text(args.name))
                return EXIT_OK
            return _execute(load_preset(args.name), args)
        return _execute(load_config(args.config), args)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
