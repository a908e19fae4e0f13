"""``viewco`` command line: gen-data, train, eval, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import load_config
from .data import DEFAULT_CLASSES, SHAPE_CLASSES, load_dataset, write_dataset
from .errors import ConfigError, ViewCoError
from .evaluation import evaluate
from .segment import LabelSet, ZeroShotSegmenter
from .trainer import fit, load_checkpoint

log = logging.getLogger("viewco")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _classes(text: str) -> tuple[str, ...]:
    names = tuple(c.strip() for c in text.split(",") if c.strip())
    if not names:
        raise argparse.ArgumentTypeError("empty class list")
    bad = [c for c in names if c not in SHAPE_CLASSES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown classes {bad}; choose from {SHAPE_CLASSES}")
    if len(set(names)) != len(names):
        raise argparse.ArgumentTypeError("duplicate class names")
    return names


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def _probability(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("must lie in (0, 1)")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="viewco", description="Multi-view consistent text-supervised segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic image-caption corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=_non_negative, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=_classes, default=DEFAULT_CLASSES)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval", help="zero-shot segmentation of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--threshold", type=_probability, default=None)
    p.add_argument("--consistency", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of losses and encoders")
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_gen_data(args) -> int:
    root = write_dataset(args.out, args.size, args.seed, args.classes)
    print(f"wrote {args.size} pairs to {root}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    ckpt = fit(config)
    print(f"trained {ckpt.step} steps; checkpoint {config.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    data = load_dataset(args.dataset)
    if data.classes != state.classes:
        raise ConfigError(f"dataset classes {data.classes} differ from the checkpoint's {state.classes}")
    cfg = state.config.eval
    threshold = cfg.threshold if args.threshold is None else args.threshold
    labels = LabelSet(state.classes, threshold)
    seg = ZeroShotSegmenter.from_model(state.model, state.vocab, labels, cfg.use_trained_tau, cfg.short_side)
    preds = Path("predictions")
    preds.mkdir(exist_ok=True)
    report = evaluate(data.items, lambda im: seg(im).pixel_mask, labels.num_classes, args.consistency,
                      state.config.aug, cfg.eval_seed, preds)
    report.write_tsv("eval.tsv")
    print(report.summary())
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_gradcheck(args.seed)
    ok = True
    for name, err in report.items():
        passed = bool(np.isfinite(err)) and err < gradcheck.TOLERANCE
        ok &= passed
        print(f"{name}\t{err:.3e}\t{'pass' if passed else 'FAIL'}")
    return 0 if ok else 1


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"viewco: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ViewCoError, OSError) as exc:
        print(f"viewco: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
