"""Full objective versus the text-to-single-view ablation on the toy corpus.

Both arms share the corpus, the held-out evaluation set, the encoder and text
presets, the optimizer schedule and the seed; only ``loss_mode`` differs.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .config import EvalConfig, TrainConfig
from .data import DEFAULT_CLASSES, Dataset, make_dataset
from .evaluation import evaluate
from .segment import LabelSet, ZeroShotSegmenter
from .trainer import train

TRAIN_SEED = 0
EVAL_SEED = 99
TOY_THRESHOLD = 0.8


@dataclass
class ArmResult:
    mode: str
    seed: int
    miou: float
    consistency: float
    seconds: float
    by_threshold: dict = field(default_factory=dict)  # threshold -> (miou, consistency)


@dataclass
class Comparison:
    threshold: float
    arms: list[ArmResult] = field(default_factory=list)

    def pair(self, seed: int) -> tuple[ArmResult, ArmResult]:
        full = next(a for a in self.arms if a.seed == seed and a.mode == "viewco")
        ablation = next(a for a in self.arms if a.seed == seed and a.mode == "single_view")
        return full, ablation

    @property
    def seeds(self) -> list[int]:
        return sorted({a.seed for a in self.arms})

    def miou_wins(self) -> int:
        return sum(f.miou > a.miou for f, a in map(self.pair, self.seeds))

    def consistency_wins(self) -> int:
        return sum(f.consistency > a.consistency for f, a in map(self.pair, self.seeds))

    def table(self) -> str:
        lines = ["seed\tmode\tmIoU\tconsistency\tseconds"]
        for a in sorted(self.arms, key=lambda a: (a.seed, a.mode)):
            lines.append(f"{a.seed}\t{a.mode}\t{a.miou:.4f}\t{a.consistency:.4f}\t{a.seconds:.1f}")
        return "\n".join(lines)


def toy_config(mode: str, seed: int, epochs: int = 8) -> TrainConfig:
    return TrainConfig.toy(loss_mode=mode, seed=seed, epochs=epochs, warmup_epochs=1, checkpoint="",
                           metrics_log="", eval=EvalConfig(threshold=TOY_THRESHOLD))


def run_arm(mode: str, seed: int, train_set: Dataset, eval_set: Dataset, threshold: float = TOY_THRESHOLD,
            epochs: int = 8, extra_thresholds: Sequence[float] = ()) -> ArmResult:
    cfg = toy_config(mode, seed, epochs)
    t0 = time.perf_counter()
    state = train(cfg, train_set)
    labels = LabelSet(train_set.classes, threshold)
    seg = ZeroShotSegmenter.from_model(state.model, state.vocab, labels, cfg.eval.use_trained_tau)
    result = None
    by_threshold = {}
    for thr in (threshold, *extra_thresholds):
        report = evaluate(eval_set.items, lambda im: seg(im, thr).pixel_mask, labels.num_classes,
                          aug=cfg.aug, eval_seed=cfg.eval.eval_seed)
        by_threshold[thr] = (report.miou, report.consistency)
        if result is None:
            result = (report.miou, report.consistency)
    return ArmResult(mode, seed, *result, time.perf_counter() - t0, by_threshold)


def compare(seeds: Sequence[int] = (0, 1, 2), train_size: int = 2000, eval_size: int = 200, epochs: int = 8,
            threshold: float = TOY_THRESHOLD, extra_thresholds: Sequence[float] = (),
            classes: Sequence[str] = DEFAULT_CLASSES, log=None) -> Comparison:
    """Train and score both arms for every seed."""
    train_set = make_dataset(train_size, TRAIN_SEED, classes)
    eval_set = make_dataset(eval_size, EVAL_SEED, classes)
    out = Comparison(threshold)
    for seed in seeds:
        for mode in ("viewco", "single_view"):
            arm = run_arm(mode, seed, train_set, eval_set, threshold, epochs, extra_thresholds)
            out.arms.append(arm)
            if log is not None:
                log(f"seed {seed} {mode}: mIoU={arm.miou:.4f} consistency={arm.consistency:.4f} "
                    f"({arm.seconds:.0f}s)")
    return out


if __name__ == "__main__":
    torch.set_num_threads(min(4, torch.get_num_threads()))
    res = compare(extra_thresholds=(0.5, 0.9, 0.95), log=print)
    print(res.table())
    for a in res.arms:
        print(a.seed, a.mode, {k: tuple(np.round(v, 4)) for k, v in a.by_threshold.items()})
    print(f"mIoU wins {res.miou_wins()}/3, consistency wins {res.consistency_wins()}/3")
