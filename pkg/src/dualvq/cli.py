"""Command-line entry points: train, eval, ablate, export.

Exit codes: 0 success, 2 config error, 3 runtime (non-finite) abort.
"""

from __future__ import annotations

import argparse
import json
import sys

from .autodiff import NonFiniteError
from .config import ConfigError, config_from_dict, load_config
from .metrics import sanitize_for_json
from .run import export_codebook, run_ablation, run_eval, run_train


def _load_with_overrides(path: str, seed=None, out=None):
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: parse error at line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out_dir"] = out
    return config_from_dict(raw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualvq",
                                     description="Dual-codebook VQ autoencoder runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write CSV logs + checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--out", default=None, help="write metrics JSON here")

    p = sub.add_parser("ablate", help="run the config's experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("export", help="dump a codebook from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--which", choices=("global", "local"), required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = load_config(args.config) if args.seed is None and args.out is None else \
                _load_with_overrides(args.config, args.seed, args.out)
            result = run_train(cfg, resume=args.resume, force=args.force)
            print(f"run complete: {result.out_dir}")
            print(f"  steps csv : {result.steps_csv}")
            print(f"  final ckpt: {result.final_checkpoint}")
        elif args.command == "eval":
            ev = run_eval(args.checkpoint, split=args.split, out_path=args.out)
            print(json.dumps(sanitize_for_json(ev), indent=1, sort_keys=True))
        elif args.command == "ablate":
            cfg = load_config(args.config) if args.seed is None and args.out is None else \
                _load_with_overrides(args.config, args.seed, args.out)
            path = run_ablation(cfg)
            print(f"ablation table: {path}")
        elif args.command == "export":
            export_codebook(args.checkpoint, args.which, args.out)
            print(f"codebook written: {args.out}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NonFiniteError as e:
        print(f"runtime abort: {e}", file=sys.stderr)
        return 3
    return 0
