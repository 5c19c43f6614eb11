"""Command-line entry point.

Commands: synth-data, finetune, build-prototypes, infer, evaluate.
Exit codes: 0 ok, 2 config error, 3 data error, 4 port error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import app
from .config import load_config
from .errors import ConfigError, DataError, PortError


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run configuration file")
    parser.add_argument("--data-root", dest="data_root", help="dataset root directory")
    parser.add_argument("--layout", choices=("mvtec", "visa", "synthetic"))
    parser.add_argument("--out", dest="output_dir", help="output directory")
    parser.add_argument("--k", type=int, help="shots per category")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--backend", choices=("mock", "oracle", "factory"))
    parser.add_argument("--image-size", dest="image_size", type=int)
    parser.add_argument("--alpha", type=float, help="prototype fusion weight")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--cache-dir", dest="cache_dir")


_NON_CONFIG_ARGS = ("command", "config", "scores", "verbose")


def _cfg_from(args: argparse.Namespace):
    overrides = {k: v for k, v in vars(args).items()
                 if k not in _NON_CONFIG_ARGS and v is not None}
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inpaintad",
                                     description="Few-shot anomaly detection by mask-and-inpaint scoring")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic texture dataset")
    _add_common(p)

    p = sub.add_parser("finetune", help="fine-tune the denoiser and decoder ports")
    _add_common(p)

    p = sub.add_parser("build-prototypes", help="build and persist per-category prototype banks")
    _add_common(p)

    p = sub.add_parser("infer", help="score every test image")
    _add_common(p)

    p = sub.add_parser("evaluate", help="evaluate a score directory")
    _add_common(p)
    p.add_argument("--scores", help="score directory (default: <out>/scores)")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _cfg_from(args)
        if args.command == "synth-data":
            root = app.cmd_synth(cfg)
            print(f"synthetic dataset written to {root}")
        elif args.command == "finetune":
            paths = app.cmd_finetune(cfg)
            for name, path in sorted(paths.items()):
                print(f"{name}: {path}")
        elif args.command == "build-prototypes":
            paths = app.cmd_build_prototypes(cfg)
            for cat, path in sorted(paths.items()):
                print(f"{cat}: {path}")
        elif args.command == "infer":
            scores_dir = app.cmd_infer(cfg)
            print(f"scores written to {scores_dir}")
        elif args.command == "evaluate":
            report = app.cmd_evaluate(cfg, getattr(args, "scores", None))
            mean = report.mean
            print("category mean: " + "  ".join(f"{k}={v:.4f}" for k, v in sorted(mean.items())))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except PortError as exc:
        print(f"port error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
