"""``smds`` command line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from .errors import ConfigError, FilterError, ModelFormatError, SimulationError, SmootherError
from .harness import COMMANDS, ExperimentConfig, load_config, run
from .learning import FitAborted

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

_PATH_FLAGS = ("train", "test", "bundle", "model", "true_model")


def build_parser():
    parser = argparse.ArgumentParser(prog="smds", description="Switching multiscale dynamical systems experiments.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="YAML or JSON experiment config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    parser.add_argument("--method", action="append", help="method name; repeat to compare several")
    parser.add_argument("--regimes", type=int, help="number of regimes M for switching methods")
    parser.add_argument("--latent-dim", type=int)
    parser.add_argument("--iters", type=int, help="EM iterations")
    parser.add_argument("--tau", type=float)
    parser.add_argument("--folds", type=int)
    parser.add_argument("--systems", type=int)
    for name in _PATH_FLAGS:
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, help=f"{name.replace('_', ' ')} path")
    return parser


def config_from_args(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    em = dict(cfg.em)
    for key, value in (("M", args.regimes), ("d", args.latent_dim), ("max_iters", args.iters), ("tau", args.tau)):
        if value is not None:
            em[key] = value
    changes = {"em": em}
    if args.method:
        changes["methods"] = list(args.method)
    if args.folds is not None:
        changes["folds"] = args.folds
    if args.systems is not None:
        changes["systems"] = args.systems
    paths = dict(cfg.paths)
    for name in _PATH_FLAGS:
        if getattr(args, name):
            paths[name] = getattr(args, name)
    changes["paths"] = paths
    return replace(cfg, **changes)


def exit_code(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (OSError, ModelFormatError)):
        return EXIT_IO
    if isinstance(exc, (FitAborted, FilterError, SmootherError, SimulationError, ArithmeticError,
                        np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    return None


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        summary = run(cfg, args.command, args.out, workers=max(1, args.workers), force=args.force)
    except Exception as exc:
        code = exit_code(exc)
        if code is None:
            raise
        print(f"smds {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    print(json.dumps(summary, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
