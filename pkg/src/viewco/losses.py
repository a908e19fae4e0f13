"""Contrastive objectives: segment consistency, text-to-views and multi-prompt.

All losses take row-normalized embeddings and a temperature (float or tensor).
Every InfoNCE term goes through :func:`_nce_rows`, which an active
:class:`PairCounter` can observe to count positive and negative pairs.
"""
from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, NormalizationError, ShapeError
from .numerics import l2_normalize, log_softmax, logsumexp, similarity_matrix

NORM_TOL = 1e-3
TAU_MIN, TAU_MAX = 0.01, 1.0


class Temperature(nn.Module):
    """Learnable temperature stored as ``log_tau``; clamp after each update."""

    def __init__(self, init: float = 0.07):
        super().__init__()
        self.log_tau = nn.Parameter(torch.tensor(math.log(init)))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def forward(self) -> torch.Tensor:
        return self.tau

    @torch.no_grad()
    def clamp_(self) -> None:
        self.log_tau.clamp_(math.log(TAU_MIN), math.log(TAU_MAX))


class ProjectionHead(nn.Module):
    """Two-layer perceptron into the shared embedding space."""

    def __init__(self, dim: int, out_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


@dataclass
class LossBreakdown:
    seg_consistency: torch.Tensor
    text_views: torch.Tensor
    multilabel: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> tuple[float, float, float, float]:
        return (float(self.seg_consistency), float(self.text_views),
                float(self.multilabel), float(self.total))


class PairCounter:
    """Tallies positive/negative pairs seen by each directed NCE term."""

    def __init__(self):
        self.positives: dict[str, int] = defaultdict(int)
        self.negatives: dict[str, int] = defaultdict(int)

    def record(self, tag: str, rows: int, keys: int, positives_per_row: int = 1) -> None:
        self.positives[tag] += rows * positives_per_row
        self.negatives[tag] += rows * (keys - positives_per_row)


_counters: list[PairCounter] = []


@contextlib.contextmanager
def count_pairs():
    counter = PairCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _record(tag, rows, keys, positives_per_row=1):
    for c in _counters:
        c.record(tag, rows, keys, positives_per_row)


def _check_normalized(*tensors) -> None:
    for t in tensors:
        norms = torch.linalg.vector_norm(t.detach(), dim=-1)
        if bool(((norms - 1).abs() > NORM_TOL).any()):
            raise NormalizationError("inputs must be l2-normalized")


def _nce_rows(queries: torch.Tensor, keys: torch.Tensor, tau, tag: str) -> torch.Tensor:
    """Per-row InfoNCE where row ``i`` of ``queries`` is positive with key ``i``.

    Shapes ``(..., n, d) x (..., n, d) -> (..., n)``.
    """
    logits = similarity_matrix(queries, keys)
    n = logits.shape[-1]
    _record(tag, queries.shape[:-1].numel(), n)
    return -torch.diagonal(log_softmax(logits, tau), dim1=-2, dim2=-1)


def info_nce(q: torch.Tensor, keys: torch.Tensor, pos_index: int, tau) -> torch.Tensor:
    """``-log(exp(q.k+/tau) / sum_i exp(q.k_i/tau))`` for a single query."""
    if q.dim() != 1 or keys.dim() != 2:
        raise ShapeError("info_nce expects q of shape (d,) and keys of shape (N, d)")
    if not 0 <= pos_index < keys.shape[0]:
        raise IndexError(f"pos_index {pos_index} out of range for {keys.shape[0]} keys")
    _check_normalized(q, keys)
    logits = similarity_matrix(q[None], keys)[0]
    _record("info_nce", 1, keys.shape[0])
    return -log_softmax(logits, tau)[pos_index]


def seg_consistency_loss(z_ut, z_vt, z_us, z_vs, tau) -> torch.Tensor:
    """Bidirectional teacher/student segment contrast across the two views.

    Inputs are ``(B, K, d)``; teacher tensors should already be detached by the
    caller. Positives are same-position segments of the same image, negatives
    the other ``K - 1`` segments of that image.
    """
    shapes = {tuple(z.shape) for z in (z_ut, z_vt, z_us, z_vs)}
    if len(shapes) != 1 or len(next(iter(shapes))) != 3:
        raise ShapeError(f"expected four equal (B, K, d) tensors, got {shapes}")
    B, K, _ = z_ut.shape
    if K < 2:
        raise ConfigError("segment contrast needs K >= 2")
    _check_normalized(z_ut, z_vt, z_us, z_vs)
    scale = 1.0 / (K * B)
    t2s = (_nce_rows(z_ut, z_vs, tau, "seg:ut->vs").sum() + _nce_rows(z_vt, z_us, tau, "seg:vt->us").sum()) * scale
    s2t = (_nce_rows(z_us, z_vt, tau, "seg:us->vt").sum() + _nce_rows(z_vs, z_ut, tau, "seg:vs->ut").sum()) * scale
    return t2s + s2t


def project_view(segment_tokens: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    """Average-pool ``(..., K, d)`` segment tokens, project, normalize."""
    if segment_tokens.shape[-2] < 1:
        raise ShapeError("need at least one segment token")
    return l2_normalize(head(segment_tokens.mean(dim=-2)))


def views_to_text(z_view, z_text, tau, tag="views->text") -> torch.Tensor:
    """Mean over the batch of ``info_nce(z_view[i], z_text, i)``."""
    return _nce_rows(z_view, z_text, tau, tag).mean()


def text_to_view(z_text, z_view, tau, tag="text->views") -> torch.Tensor:
    return _nce_rows(z_text, z_view, tau, tag).mean()


def text_views_loss(z_iu, z_iv, z_t, tau) -> torch.Tensor:
    """One caption against both augmented views, in both directions."""
    if not (z_iu.shape == z_iv.shape == z_t.shape) or z_t.dim() != 2:
        raise ShapeError("text_views_loss expects three (B, d) tensors")
    _check_normalized(z_iu, z_iv, z_t)
    v2t = views_to_text(z_iu, z_t, tau) + views_to_text(z_iv, z_t, tau)
    t2v = text_to_view(z_t, z_iu, tau) + text_to_view(z_t, z_iv, tau)
    return v2t + t2v


def single_view_text_loss(z_i, z_t, tau) -> torch.Tensor:
    """Plain symmetric image-text contrast on one view (the ablation objective)."""
    _check_normalized(z_i, z_t)
    return views_to_text(z_i, z_t, tau, "view->text") + text_to_view(z_t, z_i, tau, "text->view")


def views_to_prompts(z_view, z_prompts, tau) -> torch.Tensor:
    """Multi-positive contrast of one view against all ``B x M`` prompts.

    Every prompt of image ``i`` is a positive for view ``i``.
    """
    B, M, d = z_prompts.shape
    logits = similarity_matrix(z_view, z_prompts.reshape(B * M, d)).reshape(B, B, M) / tau
    _record("views->prompts", B, B * M, positives_per_row=M)
    pos = logsumexp(torch.diagonal(logits, dim1=0, dim2=1).transpose(0, 1), dim=-1)
    return (logsumexp(logits, dim=(1, 2)) - pos).mean()


def multilabel_prompt_loss(z_iu, z_iv, z_prompts, tau) -> torch.Tensor:
    if z_prompts.dim() != 3:
        raise ShapeError("prompt embeddings must be (B, M, d)")
    B, M, d = z_prompts.shape
    if M == 0:
        raise ConfigError("need at least one prompt per caption")
    if z_iu.shape != (B, d) or z_iv.shape != (B, d):
        raise ShapeError("view embeddings must be (B, d) matching the prompts")
    _check_normalized(z_iu, z_iv, z_prompts)
    v2p = 0.5 * (views_to_prompts(z_iu, z_prompts, tau) + views_to_prompts(z_iv, z_prompts, tau))
    # (M, B, d) queries against (B, d) keys, broadcast over prompts
    prompts = z_prompts.transpose(0, 1)
    p2v = (_nce_rows(prompts, z_iu.expand(M, B, d), tau, "prompts->views").sum()
           + _nce_rows(prompts, z_iv.expand(M, B, d), tau, "prompts->views").sum()) / (2 * M * B)
    return v2p + p2v


def total_loss(seg_consistency, text_views, multilabel) -> LossBreakdown:
    total = seg_consistency + text_views
    total = total + multilabel
    return LossBreakdown(seg_consistency, text_views, multilabel, total)
