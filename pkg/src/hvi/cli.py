"""Command line interface.

    hvi <experiment> --config PATH [--seed N --k N --m N --out PATH
                                    --checkpoint PATH --estimator autodiff|dreg]
    hvi make-data --out DIR

Exit codes: 0 ok, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import sys

from .config import EXPERIMENTS, ConfigError, load_config
from .experiments import RUNNERS, DataError, EXPERIMENT_DEFAULTS, make_data
from .idx import IdxFormatError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvi", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--seed", default=None)
        p.add_argument("--k", default=None)
        p.add_argument("--m", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--estimator", default=None, choices=["autodiff", "dreg"])
        p.add_argument("--data-path", dest="data_path", default=None)
        p.add_argument("--epochs", default=None)
        p.add_argument("--steps", default=None)
        p.add_argument("--replicates", default=None)
        p.add_argument("--subset-size", dest="subset_size", default=None)
    mk = sub.add_parser("make-data", help="materialize the offline digit set as IDX files")
    mk.add_argument("--out", default="data", help="output directory")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "make-data":
        try:
            img, lab = make_data(args.out)
        except DataError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"wrote {img}\nwrote {lab}")
        return EXIT_OK
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config") and v is not None}
    overrides["experiment"] = args.command
    defaults = dict(EXPERIMENT_DEFAULTS.get(args.command, {}))
    try:
        cfg = load_config(args.config, overrides=overrides, defaults=defaults)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        RUNNERS[args.command](cfg)
    except (DataError, IdxFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {cfg.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
