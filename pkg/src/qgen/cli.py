"""Command-line interface.

    qgen <command> --config pipeline.toml [--out-dir DIR] [--seed N]
                   [--backend {mock,http}]

Commands: generate, filter, triplets, export-train, retrieve, rerank,
evaluate, ablate, validate-config. Exit codes: 0 success, 1 configuration or
validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, QgenError
from . import pipeline

COMMANDS = {
    "generate": pipeline.cmd_generate,
    "filter": pipeline.cmd_filter,
    "triplets": pipeline.cmd_triplets,
    "export-train": pipeline.cmd_export_train,
    "retrieve": pipeline.cmd_retrieve,
    "rerank": pipeline.cmd_rerank,
    "evaluate": pipeline.cmd_evaluate,
    "ablate": pipeline.cmd_ablate,
    "validate-config": pipeline.cmd_validate_config,
}

# CLI --seed pins every stage-level seed at once
_SEED_KEYS = (
    ("generation", "seed"),
    ("filter", "seed"),
    ("triplets", "seed"),
    ("export", "seed"),
    ("ablate", "seed"),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qgen", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=f"run the {name} stage")
        cmd.add_argument("--config", required=True, help="pipeline TOML file")
        cmd.add_argument("--out-dir", help="override output.out_dir")
        cmd.add_argument("--seed", type=int, help="override every stage seed")
        cmd.add_argument(
            "--backend", choices=("mock", "http"), help="override backend.mode"
        )
        if name == "ablate":
            cmd.add_argument(
                "--sizes", help="comma-separated generation pool sizes (e.g. 100,200)"
            )
            cmd.add_argument("--keep", type=int, help="queries kept per pool")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    if args.out_dir:
        overrides[("output", "out_dir")] = args.out_dir
    if args.seed is not None:
        for key in _SEED_KEYS:
            overrides[key] = args.seed
    if args.backend:
        overrides[("backend", "mode")] = args.backend
        if args.backend == "mock":
            overrides[("backend", "generator_url")] = ""
    if getattr(args, "sizes", None):
        try:
            overrides[("ablate", "sizes")] = [int(s) for s in args.sizes.split(",") if s]
        except ValueError:
            raise ConfigError(f"--sizes must be comma-separated integers, got {args.sizes!r}")
    if getattr(args, "keep", None) is not None:
        overrides[("ablate", "keep")] = args.keep
    return overrides


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, overrides=_overrides(args))
        result = COMMANDS[args.command](cfg)
        print(result.summary)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except QgenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logging.getLogger(__name__).debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
