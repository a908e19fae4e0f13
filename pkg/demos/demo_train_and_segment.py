"""
Train briefly, then segment zero-shot
=====================================

A few epochs on a small corpus with the full objective and with the
single-view ablation. Each trained teacher then labels held-out images by
comparing segment embeddings with prompted class names. Scores at this
size are noisy; ``python -m viewco.experiments`` runs the full comparison.
"""
import time

import torch

from viewco.config import TrainConfig
from viewco.data import make_dataset
from viewco.evaluation import evaluate
from viewco.segment import LabelSet, ZeroShotSegmenter
from viewco.trainer import train

train_set = make_dataset(600, seed=0)
eval_set = make_dataset(60, seed=99)

segmenters = {}
for mode in ("viewco", "single_view"):
    t0 = time.perf_counter()
    cfg = TrainConfig.toy(loss_mode=mode, epochs=4, warmup_epochs=1, checkpoint="", metrics_log="")
    state = train(cfg, train_set)
    first, last = state.history[0][-1], state.history[-1][-1]
    labels = LabelSet(train_set.classes, 0.8)
    seg = segmenters[mode] = ZeroShotSegmenter.from_model(state.model, state.vocab, labels)
    report = evaluate(eval_set.items, lambda im: seg(im).pixel_mask, labels.num_classes)
    print(f"{mode:12s} loss {first:.3f} -> {last:.3f}  {report.summary()}  ({time.perf_counter() - t0:.0f}s)")

###############################################################################
# One prediction up close, from the full model

result = segmenters["viewco"](eval_set.items[0].image)
print(eval_set.items[0].caption)
print("segment classes:", result.segment_classes)
print(torch.from_numpy(result.pixel_mask[::4, ::4]))
