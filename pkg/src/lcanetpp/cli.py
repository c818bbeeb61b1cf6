"""Command-line interface: ``python -m lcanetpp <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import harness
from .errors import DataError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise harness.UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated number list: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lcanetpp", description="Train and stress-test LCA audio classifiers.")
    p.add_argument("command", choices=harness.COMMANDS)
    p.add_argument("inputs", nargs="*", help="report files to merge (report command)")
    p.add_argument("--model", default="lcanet++", choices=["cnn", "lcanet", "lcanet++"])
    p.add_argument("--data-root")
    p.add_argument("--classes", type=_names, default=("yes", "no", "stop"))
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr", type=_floats, default=(), help="e.g. 15,20,24,25,inf")
    p.add_argument("--attack", choices=["fgsm", "pgd", "gaussian", "evasion"])
    p.add_argument("--eps", type=_floats, default=(), help="e.g. 0,0.01,0.016,0.02,0.03")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--channels", type=_ints, default=(32, 64), help="feature maps of layers 1,2")
    p.add_argument("--lca-iters", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--pgd-steps", type=int, default=10)
    p.add_argument("--cache-dir", type=Path, default=None,
                   help="feature cache location (default: $XDG_CACHE_HOME/lcanetpp)")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        opts = {k: v for k, v in vars(args).items() if k not in ("cache_dir", "no_cache", "verbose")}
        if len(opts["channels"]) != 2:
            raise harness.UsageError("--channels takes two integers")
        cfg = harness.config_from_dict(opts)
        cache = None if args.no_cache else (args.cache_dir or harness.default_cache_dir())
        records = harness.run(cfg, cache_dir=cache)
    except harness.UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not cfg.out or cfg.command == "report":
        sys.stdout.write(harness.format_report(records, cfg.format))
    return EXIT_OK
