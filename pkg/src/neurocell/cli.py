"""``neurocell`` command-line entry point.

Usage: ``neurocell <subcommand> [--config PATH] [--seed N] [--deterministic] [--KEY VALUE ...]``

Any config field may be overridden by ``--field-name value`` (values are read
as JSON when possible, e.g. ``--class-mix "[0.4, 0.4, 0.2]"``). Exit status is
0 on success, 1 when gradcheck finds an error above tolerance, 2 for missing
inputs or invalid configuration and 3 for internal contract violations.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import ConfigError, FormatError, GenerationError, NeurocellError

SUBCOMMANDS = ("synth", "train-seg", "segment", "extract", "train-cls", "classify", "evaluate", "gradcheck")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONTRACT = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="neurocell",
        description="Cell segmentation and classification pipeline.",
        epilog="Any config field can be overridden with --field-name VALUE.",
    )
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", type=Path, help="JSON file with paths/synth/imaging/network/training sections")
    p.add_argument("--seed", type=int, help="master seed (overrides training.seed)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded numerics for bitwise reruns")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(extra: list[str]) -> dict:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or tok == "--":
            raise ConfigError(f"unexpected argument {tok!r}")
        name, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise ConfigError(f"option {tok} needs a value")
            value = extra[i + 1]
            i += 1
        out[name.replace("-", "_")] = _parse_value(value)
        i += 1
    return out


def load_config(path: Path | None, overrides: dict) -> dict:
    file_config = None
    if path is not None:
        if not path.exists():
            raise FileNotFoundError(path)
        try:
            file_config = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(file_config, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return pipeline.merge_config(file_config, overrides)


def _single_thread():
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def run(subcommand: str, cfg: dict, emit=print) -> int:
    if subcommand == "gradcheck":
        return EXIT_OK if pipeline.run_gradcheck(cfg, emit) else EXIT_FAIL
    result = pipeline.STAGES[subcommand](cfg)
    emit(json.dumps({k: v for k, v in result.items() if k not in ("folds", "scenes", "cells")}, sort_keys=True))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = _overrides(extra)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        guard = _single_thread() if args.deterministic else contextlib.nullcontext()
        with guard:
            return run(args.subcommand, cfg)
    except FileNotFoundError as exc:
        missing = exc.filename if exc.filename is not None else exc.args[0] if exc.args else exc
        print(f"neurocell: missing input: {missing}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FormatError, GenerationError) as exc:
        print(f"neurocell: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except NeurocellError as exc:
        print(f"neurocell: internal error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
