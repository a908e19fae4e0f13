"""Dataset-level zero-shot evaluation: mIoU against ground truth and view consistency."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import AugConfig, DatasetItem, augment_two_views, item_seed
from .pnm import write_mask
from .segment import confusion, cross_view_consistency, iou_from_confusion, miou

# image -> predicted pixel mask
Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class EvalReport:
    rows: list[tuple[str, float, float]] = field(default_factory=list)  # (id, miou, consistency)
    confusion: np.ndarray | None = None
    consistency: float = float("nan")

    @property
    def miou(self) -> float:
        return iou_from_confusion(self.confusion)[1]

    @property
    def per_class_iou(self) -> np.ndarray:
        return iou_from_confusion(self.confusion)[0]

    def summary(self) -> str:
        return f"mIoU={self.miou:.4f} consistency={self.consistency:.4f}"

    def write_tsv(self, path) -> None:
        lines = [f"{pid}\t{m:.6f}\t{c:.6f}\n" for pid, m, c in self.rows]
        Path(path).write_text("".join(lines), encoding="utf-8")


def evaluate(items: Sequence[DatasetItem], predict: Predictor, num_classes: int, consistency: bool = True,
             aug: AugConfig = AugConfig(), eval_seed: int = 12345, predictions_dir=None) -> EvalReport:
    """Score ``predict`` on every item.

    mIoU is computed from the confusion matrix accumulated over the whole set;
    per-image rows carry each image's own mIoU. Consistency compares the
    predictions on two augmented views of each image over their overlap.
    """
    report = EvalReport(confusion=np.zeros((num_classes, num_classes), dtype=np.int64))
    cons = []
    for it in items:
        pred = predict(it.image)
        report.confusion += confusion(pred, it.mask, num_classes)
        m = miou(pred, it.mask, num_classes)[1]
        c = float("nan")
        if consistency:
            pair = augment_two_views(it.image, item_seed(eval_seed, int(it.id) if it.id.isdigit() else it.seed), aug)
            c = cross_view_consistency(predict(pair.view_u), predict(pair.view_v), pair.geom_u, pair.geom_v,
                                       num_classes)
            cons.append(c)
        if predictions_dir is not None:
            write_mask(Path(predictions_dir) / f"{it.id}.pgm", np.asarray(pred, dtype=np.uint8))
        report.rows.append((it.id, m, c))
    if cons:
        report.consistency = float(np.mean(cons))
    return report
