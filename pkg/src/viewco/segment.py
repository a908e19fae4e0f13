"""Zero-shot segmentation with the teacher encoder, mIoU and cross-view consistency."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .data import Geometry, warp_mask
from .encoder import GroupEncoder, SegmentTokens
from .errors import ConfigError, EmptyOverlap, ShapeError
from .losses import ProjectionHead
from .numerics import l2_normalize, similarity_matrix, softmax
from .text import PromptSet, TextEncoder, Vocab, generate_prompts, tokenize_batch

THRESHOLD_PRESETS = {"voc": 0.95, "context": 0.35, "coco": 0.95}


@dataclass(frozen=True)
class LabelSet:
    """Foreground class names; background is id 0 and class ``i`` is id ``i + 1``."""

    names: tuple[str, ...]
    threshold: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ConfigError("label names must be unique")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")

    @classmethod
    def preset(cls, dataset: str, names: Sequence[str]) -> "LabelSet":
        return cls(tuple(names), THRESHOLD_PRESETS[dataset])

    @property
    def num_classes(self) -> int:
        return len(self.names) + 1


@dataclass
class SegmentationResult:
    patch_segments: np.ndarray  # (P,) ints in [0, K)
    segment_classes: np.ndarray  # (K,) ints, 0 = background
    pixel_mask: np.ndarray  # (H, W)
    grid: tuple[int, int]


def resize_nearest(image: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = image.shape[:2]
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return image[rows][:, cols]


def resize_shorter_side(image: np.ndarray, short_side: int, multiple: int = 1) -> np.ndarray:
    """Nearest-neighbor resize so the shorter side equals ``short_side``.

    The longer side keeps the aspect ratio, rounded to a multiple of
    ``multiple`` (the patch size) so the result tiles into patches.
    """
    h, w = image.shape[:2]
    if h <= w:
        nh = short_side
        nw = max(multiple, int(round(w * short_side / h / multiple)) * multiple)
    else:
        nw = short_side
        nh = max(multiple, int(round(h * short_side / w / multiple)) * multiple)
    return resize_nearest(image, nh, nw)


@torch.no_grad()
def segment_image(image: np.ndarray, teacher: GroupEncoder, short_side: int = 0):
    """Teacher segment tokens and the per-patch argmax segment.

    ``short_side`` > 0 resizes the input first (448 for the large preset).
    Returns ``(SegmentTokens, patch_segments, grid)``.
    """
    image = np.asarray(image)
    if short_side:
        image = resize_shorter_side(image, short_side, teacher.config.patch_size)
    p = teacher.config.patch_size
    grid = (image.shape[0] // p, image.shape[1] // p)
    out = teacher(torch.from_numpy(np.ascontiguousarray(image)), hard=True)
    patch_segments = out.assignment[0].argmax(dim=-1).cpu().numpy()
    return SegmentTokens(out.segments[0], "original", "teacher"), patch_segments, grid


@torch.no_grad()
def label_embeddings(label_set: LabelSet, text_encoder: TextEncoder, text_head: ProjectionHead,
                     vocab: Vocab, prompts: PromptSet = PromptSet()) -> torch.Tensor:
    """One embedding per class: mean of its normalized prompt embeddings, renormalized."""
    if not label_set.names:
        raise ConfigError("label set is empty")
    L = text_encoder.config.max_len
    rows = []
    for name in label_set.names:
        ids = tokenize_batch(generate_prompts(name, prompts), vocab, L)
        z = l2_normalize(text_head(text_encoder(ids)))
        rows.append(l2_normalize(z.mean(dim=0)))
    return torch.stack(rows)


def classify_similarities(sims: torch.Tensor, tau, threshold: float) -> np.ndarray:
    """Class id per row of a (K, C) similarity matrix: argmax of the tempered
    softmax if its probability reaches ``threshold``, else background (0)."""
    if sims.shape[-1] == 0:
        raise ConfigError("label set is empty")
    probs = softmax(sims, tau)
    idx = probs.argmax(dim=-1)  # first maximum, so ties go to the lower class
    best = probs.gather(-1, idx[..., None])[..., 0]
    return np.where(best.cpu().numpy() >= threshold, idx.cpu().numpy() + 1, 0).astype(np.int64)


def classify_embeddings(segment_embeddings: torch.Tensor, label_emb: torch.Tensor, tau, threshold: float) -> np.ndarray:
    if label_emb.shape[0] == 0:
        raise ConfigError("label set is empty")
    return classify_similarities(similarity_matrix(segment_embeddings, label_emb), tau, threshold)


@torch.no_grad()
def classify_segments(segment_tokens, label_emb: torch.Tensor, vision_head: ProjectionHead, tau,
                      threshold: float) -> np.ndarray:
    feats = segment_tokens.features if isinstance(segment_tokens, SegmentTokens) else segment_tokens
    seg_emb = l2_normalize(vision_head(feats))
    return classify_embeddings(seg_emb, label_emb.to(seg_emb.dtype), tau, threshold)


def render_pixel_mask(patch_segments: np.ndarray, segment_classes: np.ndarray, grid: tuple[int, int],
                      target: tuple[int, int]) -> np.ndarray:
    gh, gw = grid
    classes_per_patch = np.asarray(segment_classes)[np.asarray(patch_segments)].reshape(gh, gw)
    H, W = target
    return classes_per_patch[(np.arange(H) * gh) // H][:, (np.arange(W) * gw) // W]


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int, valid: np.ndarray | None = None) -> np.ndarray:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if valid is not None:
        pred, gt = pred[valid], gt[valid]
    pred, gt = pred.ravel().astype(np.int64), gt.ravel().astype(np.int64)
    if pred.size and (max(pred.max(), gt.max()) >= num_classes or min(pred.min(), gt.min()) < 0):
        raise ShapeError("class id out of range")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray):
    """Per-class IoU (NaN for classes absent from both masks) and their mean."""
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    present = ~np.isnan(iou)
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return iou, mean


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, valid: np.ndarray | None = None):
    return iou_from_confusion(confusion(pred, gt, num_classes, valid))


def cross_view_consistency(result_u, result_v, geom_u: Geometry, geom_v: Geometry, num_classes: int) -> float:
    """mIoU between view u's prediction warped into view v and view v's prediction."""
    mask_u = result_u.pixel_mask if isinstance(result_u, SegmentationResult) else np.asarray(result_u)
    mask_v = result_v.pixel_mask if isinstance(result_v, SegmentationResult) else np.asarray(result_v)
    warped, valid = warp_mask(mask_u, geom_u, geom_v)
    if not valid.any():
        raise EmptyOverlap("views do not overlap")
    return miou(warped, mask_v, num_classes, valid)[1]


class ZeroShotSegmenter:
    """Bundles the teacher, text side and label embeddings for repeated inference."""

    def __init__(self, teacher: GroupEncoder, vision_head: ProjectionHead, text_encoder: TextEncoder,
                 text_head: ProjectionHead, vocab: Vocab, label_set: LabelSet, tau=1.0,
                 prompts: PromptSet = PromptSet(), short_side: int = 0):
        self.teacher = teacher
        self.vision_head = vision_head
        self.label_set = label_set
        self.tau = tau
        self.short_side = short_side
        self.label_emb = label_embeddings(label_set, text_encoder, text_head, vocab, prompts)

    @classmethod
    def from_model(cls, model, vocab: Vocab, label_set: LabelSet, use_trained_tau: bool = True,
                   short_side: int = 0) -> "ZeroShotSegmenter":
        tau = model.tau("tv").item() if use_trained_tau else 1.0
        return cls(model.teacher, model.vision_head, model.text_encoder, model.text_head, vocab, label_set,
                   tau, model.config.prompts, short_side)

    def __call__(self, image: np.ndarray, threshold: float | None = None) -> SegmentationResult:
        threshold = self.label_set.threshold if threshold is None else threshold
        tokens, patch_segments, grid = segment_image(image, self.teacher, self.short_side)
        classes = classify_segments(tokens, self.label_emb, self.vision_head, self.tau, threshold)
        mask = render_pixel_mask(patch_segments, classes, grid, np.asarray(image).shape[:2])
        return SegmentationResult(patch_segments, classes, mask, grid)
