"""Command-line entry point.

    critic-seg <generate|prepare|train-critic|split|train-seg|evaluate|table1>
               --config PATH [--seed N]... [--variant NAME] [--force]

One JSON config file drives every stage; flags only select the command, the
seeds subset, the variant, and cache forcing. CRITIC_SEG_THREADS bounds
worker threads.

Exit codes: 0 ok, 1 unexpected, 2 config error, 3 missing artifact,
4 numeric fault, 5 artifact/lock mismatch.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from .config import ExperimentConfig
from .errors import (
    ArtifactMismatchError,
    ConfigError,
    MissingArtifactError,
    NumericFaultError,
)
from .pipeline import (
    VARIANTS,
    format_table1,
    output_lock,
    run_evaluate,
    run_generate,
    run_prepare,
    run_split,
    run_table1,
    run_train_critic,
    run_train_seg,
)

logger = logging.getLogger("critic_seg")

COMMANDS = ("generate", "prepare", "train-critic", "split", "train-seg", "evaluate", "table1")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="critic-seg",
                                     description="critic-guided segmentation pipeline")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--seed", type=int, action="append", default=None,
                        help="restrict to these seeds (repeatable); default: config seeds")
    parser.add_argument("--variant", choices=VARIANTS, default=None,
                        help="train-seg/evaluate: restrict to one variant")
    parser.add_argument("--force", action="store_true", help="ignore cached artifacts")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def setup_runtime():
    threads = int(os.environ.get("CRITIC_SEG_THREADS", "4"))
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def run_command(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    seeds = args.seed if args.seed else cfg.seeds
    for s in seeds:
        if s not in cfg.seeds:
            raise ConfigError(f"--seed {s} is not in the config seeds list {cfg.seeds}")
    with output_lock(Path(cfg.out_dir)):
        if args.command == "generate":
            run_generate(cfg, args.force)
        elif args.command == "prepare":
            run_prepare(cfg, args.force)
        elif args.command == "train-critic":
            for s in seeds:
                run_train_critic(cfg, s, args.force)
        elif args.command == "split":
            for s in seeds:
                run_split(cfg, s, args.force)
        elif args.command == "train-seg":
            variants = [args.variant] if args.variant else list(VARIANTS)
            for s in seeds:
                for variant in variants:
                    run_train_seg(cfg, s, variant, args.force)
        elif args.command == "evaluate":
            targets = [args.variant] if args.variant else None
            for s in seeds:
                run_evaluate(cfg, s, targets=targets, force=args.force)
        elif args.command == "table1":
            run_table1(cfg, args.force)
            import json

            with open(Path(cfg.out_dir) / "table1.json") as f:
                print(format_table1(json.load(f)))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    setup_runtime()
    try:
        return run_command(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return 2
    except MissingArtifactError as exc:
        logger.error("missing artifact: %s", exc)
        return 3
    except NumericFaultError as exc:
        logger.error("numeric fault: %s", exc)
        return 4
    except ArtifactMismatchError as exc:
        logger.error("artifact mismatch: %s", exc)
        return 5


if __name__ == "__main__":
    sys.exit(main())
