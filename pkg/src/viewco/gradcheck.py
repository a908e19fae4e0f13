"""Finite-difference checks of every loss and both encoders at toy shapes.

``COMPONENTS`` maps a component name to a builder ``seed -> (objective,
params, samples)``; :func:`run_gradcheck` feeds each through
:func:`viewco.numerics.grad_check`. Builders are looked up at call time, so
tests may swap one out.
"""
from __future__ import annotations

from typing import Callable

import torch
from torch.func import functional_call

from .encoder import EncoderConfig, GroupEncoder
from .losses import info_nce, multilabel_prompt_loss, seg_consistency_loss, text_views_loss
from .numerics import grad_check, l2_normalize
from .text import TextConfig, TextEncoder

TOLERANCE = 1e-4
DTYPE = torch.float64


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _randn(g, *shape):
    return torch.randn(*shape, generator=g, dtype=DTYPE)


def _info_nce(seed):
    g = _gen(seed)
    q, keys = _randn(g, 8), _randn(g, 5, 8)
    tau = torch.tensor(0.3, dtype=DTYPE)
    return (lambda q, k, t: info_nce(l2_normalize(q), l2_normalize(k), 2, t)), [q, keys, tau], None


def _seg_consistency(seed):
    g = _gen(seed)
    zs = [_randn(g, 2, 3, 6) for _ in range(4)]
    tau = torch.tensor(0.5, dtype=DTYPE)

    def f(a, b, c, d, t):
        return seg_consistency_loss(*(l2_normalize(z) for z in (a, b, c, d)), t)
    return f, [*zs, tau], None


def _text_views(seed):
    g = _gen(seed)
    zs = [_randn(g, 3, 6) for _ in range(3)]
    tau = torch.tensor(0.4, dtype=DTYPE)
    return (lambda a, b, c, t: text_views_loss(l2_normalize(a), l2_normalize(b), l2_normalize(c), t)), [*zs, tau], None


def _multilabel(seed):
    g = _gen(seed)
    zu, zv, zp = _randn(g, 3, 6), _randn(g, 3, 6), _randn(g, 3, 2, 6)
    tau = torch.tensor(0.4, dtype=DTYPE)
    return (lambda a, b, p, t: multilabel_prompt_loss(l2_normalize(a), l2_normalize(b), l2_normalize(p), t)), \
        [zu, zv, zp, tau], None


def _module_objective(module, inputs, weights, **kwargs):
    names = [n for n, _ in module.named_parameters()]

    def f(*params):
        out = functional_call(module, dict(zip(names, params)), (inputs,), kwargs)
        out = out.segments if hasattr(out, "segments") else out
        return (out * weights).sum()
    return f, [p.detach() for _, p in module.named_parameters()]


def _encoder(seed):
    torch.manual_seed(seed)
    enc = GroupEncoder(EncoderConfig.toy(embed_dim=16, depth_per_stage=(1, 1))).to(DTYPE)
    g = _gen(seed)
    images = torch.rand(2, 32, 32, 3, generator=g, dtype=DTYPE)
    weights = _randn(g, 2, 4, 16)
    # argmax is piecewise constant, so the check runs the soft assignment path
    f, params = _module_objective(enc, images, weights, hard=False)
    return f, params, 6


def _text_encoder(seed):
    torch.manual_seed(seed)
    enc = TextEncoder(TextConfig.toy(vocab_size=20, width=16, layers=1, out_dim=8)).to(DTYPE)
    g = _gen(seed)
    ids = torch.tensor([[1, 5, 9, 7, 2, 0], [1, 4, 2, 0, 0, 0]])
    weights = _randn(g, 2, 8)
    f, params = _module_objective(enc, ids, weights)
    return f, params, 6


COMPONENTS: dict[str, Callable] = {
    "info_nce": _info_nce,
    "seg_consistency": _seg_consistency,
    "text_views": _text_views,
    "multilabel": _multilabel,
    "encoder": _encoder,
    "text_encoder": _text_encoder,
}


def run_gradcheck(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per component."""
    report = {}
    for name, build in COMPONENTS.items():
        f, params, samples = build(seed)
        report[name] = grad_check(f, params, step=1e-6, samples=samples, seed=seed)
    return report
