"""Command-line interface.

Subcommands: train | partial | fewshot | eval | gradcheck | synth.
Options come from an optional JSON config file plus flags (flags win);
the seed falls back to MLSGM_SEED, then 0. Exit codes: 0 success,
2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, RunConfig, apply_overrides, load_config
from .data import FewShotSplitError, ManifestError, TensorFormatError
from .losses import DegenerateLabelsError
from .metrics import UndefinedMetricError
from .model import CheckpointError
from . import training

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

_DATA_ERRORS = (ManifestError, TensorFormatError, FewShotSplitError,
                CheckpointError, DegenerateLabelsError, UndefinedMetricError,
                FileNotFoundError)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="seed (overrides config and MLSGM_SEED)")
    p.add_argument("--out", dest="out_dir", help="output directory")


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-manifest", dest="train_manifest")
    p.add_argument("--eval-manifest", dest="eval_manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--lambda-aux", dest="lambda_aux", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlsgm",
                                     description="instance-label graph matching")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="full-label training")
    _add_common(p)
    _add_training_flags(p)

    p = sub.add_parser("partial", help="partial-label training")
    _add_common(p)
    _add_training_flags(p)
    p.add_argument("--known-fraction", dest="known_fraction", type=float)

    p = sub.add_parser("fewshot", help="two-stage base/novel training")
    _add_common(p)
    _add_training_flags(p)
    p.add_argument("--k-shot", dest="k_shot", type=int)
    p.add_argument("--base-classes", dest="base_classes",
                   type=lambda s: [int(v) for v in s.split(",")])
    p.add_argument("--novel-classes", dest="novel_classes",
                   type=lambda s: [int(v) for v in s.split(",")])
    p.add_argument("--stage2-epochs", dest="stage2_epochs", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--eval-manifest", dest="eval_manifest")

    p = sub.add_parser("gradcheck", help="finite-difference check of the pipeline")
    _add_common(p)
    p.add_argument("--step", dest="fd_step", type=float)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--c", type=int, default=4)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--height", type=int, default=4)
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    return parser


_CONFIG_KEYS = ("seed", "out_dir", "train_manifest", "eval_manifest", "epochs",
                "lr", "batch_size", "gamma", "beta", "lambda_aux",
                "known_fraction", "k_shot", "base_classes", "novel_classes",
                "stage2_epochs", "checkpoint", "fd_step", "embed_dim")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg.mode = args.command
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if hasattr(args, k)}
    apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if cfg.mode == "train":
            result = training.run_train(cfg)
        elif cfg.mode == "partial":
            result = training.run_partial(cfg)
        elif cfg.mode == "fewshot":
            result = training.run_fewshot(cfg)
        elif cfg.mode == "eval":
            result = training.run_evaluate(cfg)
        elif cfg.mode == "gradcheck":
            result = training.run_gradcheck(cfg)
        else:
            result = training.run_synth(cfg, n=args.n, c=args.c, d=args.d,
                                        h=args.height, w=args.width)
    except _DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA

    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
