"""Bottom-up grouping vision encoder.

Patch tokens pass through transformer layers together with a set of learnable
group tokens; a grouping block then assigns every patch token to one group
token (straight-through hard assignment by default) and pools. Two stages take
``P`` patches down to ``K`` segment tokens and the per-stage assignment
matrices multiply into a ``P x K`` patch-to-segment map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 32
    depth_per_stage: tuple[int, ...] = (1, 1, 1)
    heads: int = 2
    group_token_counts: tuple[int, ...] = (8, 4)
    in_channels: int = 3
    mlp_ratio: float = 2.0
    hard: bool = True
    pixel_mean: float = 0.5  # inputs are standardized before patch projection
    pixel_std: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "depth_per_stage", tuple(int(d) for d in self.depth_per_stage))
        object.__setattr__(self, "group_token_counts", tuple(int(g) for g in self.group_token_counts))
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        counts = self.group_token_counts
        if not counts or any(b >= a for a, b in zip(counts, counts[1:])):
            raise ConfigError("group_token_counts must be non-empty and strictly decreasing")
        if len(self.depth_per_stage) not in (len(counts), len(counts) + 1):
            raise ConfigError("depth_per_stage needs one entry per grouping stage (plus an optional tail)")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.pixel_std <= 0:
            raise ConfigError("pixel_std must be positive")
        if counts[0] > self.num_patches:
            raise ConfigError("first stage has more group tokens than patches")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_segments(self) -> int:
        return self.group_token_counts[-1]

    @classmethod
    def toy(cls, **overrides) -> "EncoderConfig":
        return cls(**overrides)

    @classmethod
    def large(cls, **overrides) -> "EncoderConfig":
        base = dict(image_size=224, patch_size=16, embed_dim=384, depth_per_stage=(6, 3, 3),
                    heads=6, group_token_counts=(64, 8), mlp_ratio=4.0)
        base.update(overrides)
        return cls(**base)


@dataclass
class SegmentTokens:
    """K x d segment features of one image, tagged by view and network."""

    features: torch.Tensor
    view: str = "original"
    network: str = "teacher"
    image_id: str | None = None

    def __post_init__(self):
        if self.view not in ("u", "v", "original"):
            raise ValueError(f"unknown view {self.view!r}")
        if self.network not in ("teacher", "student"):
            raise ValueError(f"unknown network {self.network!r}")


class EncoderOutput(NamedTuple):
    segments: torch.Tensor  # (B, K, d)
    assignment: torch.Tensor  # (B, P, K), composed over stages
    stage_assignments: list  # per stage (B, N_i, G_i)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, key_mask=None):
        B, N, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(B, N, 3, h, d // h).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = logits.softmax(-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, d))


class Block(nn.Module):
    """Pre-norm transformer layer."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.mlp(self.norm2(x))


def hard_assign(soft: torch.Tensor) -> torch.Tensor:
    """One-hot argmax forward, soft gradient backward.

    ``torch.argmax`` returns the first maximal index, so ties go to the lowest
    group. The residual ``soft - soft.detach()`` is exactly zero in the forward
    pass, keeping the rows exact one-hot vectors.
    """
    index = soft.argmax(dim=-1, keepdim=True)
    onehot = torch.zeros_like(soft).scatter_(-1, index, 1.0)
    return onehot + (soft - soft.detach())


class GroupingBlock(nn.Module):
    """Assign N tokens to G group tokens and pool each group."""

    def __init__(self, dim: int, mlp_ratio: float):
        super().__init__()
        self.norm_tokens = nn.LayerNorm(dim)
        self.norm_groups = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm_out = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.scale = dim ** -0.5

    def assignment_logits(self, x, groups):
        return self.k(self.norm_tokens(x)) @ self.q(self.norm_groups(groups)).transpose(-1, -2) * self.scale

    def forward(self, x, groups, hard: bool = True, gumbel: bool = False):
        """Return ``(grouped (B, G, d), assignment (B, N, G))``.

        ``gumbel`` perturbs the logits with Gumbel(0, 1) noise drawn from the
        global torch generator; used for the student during training only.
        """
        N, G = x.shape[-2], groups.shape[-2]
        if G > N:
            raise ConfigError(f"cannot group {N} tokens into {G} groups")
        logits = self.assignment_logits(x, groups)
        if gumbel:
            u = torch.rand_like(logits).clamp_(1e-9, 1.0 - 1e-9)
            logits = logits - torch.log(-torch.log(u))
        soft = logits.softmax(dim=-1)
        assign = hard_assign(soft) if hard else soft
        counts = assign.sum(dim=-2).clamp_min(1.0)
        pooled = assign.transpose(-1, -2) @ self.v(self.norm_tokens(x)) / counts[..., None]
        out = groups + self.proj(pooled)
        out = out + self.mlp(self.norm_out(out))
        return out, assign


def _to_batch(images) -> torch.Tensor:
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(np.ascontiguousarray(images))
    if images.dim() == 3:
        images = images[None]
    if images.dim() != 4:
        raise ShapeError(f"expected (B, H, W, C) images, got shape {tuple(images.shape)}")
    return images


class GroupEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d, p, c = config.embed_dim, config.patch_size, config.in_channels
        self.patch_proj = nn.Linear(p * p * c, d)
        self.pos_embed = nn.Parameter(torch.randn(1, config.num_patches, d) * 0.02)
        self.group_tokens = nn.ParameterList(
            [nn.Parameter(torch.randn(1, g, d)) for g in config.group_token_counts])
        self.stage_blocks = nn.ModuleList()
        self.groupers = nn.ModuleList()
        for depth in config.depth_per_stage[:len(config.group_token_counts)]:
            self.stage_blocks.append(nn.ModuleList(
                [Block(d, config.heads, config.mlp_ratio) for _ in range(depth)]))
            self.groupers.append(GroupingBlock(d, config.mlp_ratio))
        tail = config.depth_per_stage[len(config.group_token_counts):]
        self.tail = nn.ModuleList([Block(d, config.heads, config.mlp_ratio) for _ in range(sum(tail))])
        self.norm = nn.LayerNorm(d)

    def _pos_embed(self, gh: int, gw: int) -> torch.Tensor:
        g = self.config.grid
        if (gh, gw) == (g, g):
            return self.pos_embed
        grid = self.pos_embed.reshape(1, g, g, -1).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(gh, gw), mode="bilinear", align_corners=False)
        return grid.permute(0, 2, 3, 1).reshape(1, gh * gw, -1)

    def patchify(self, images) -> torch.Tensor:
        """(B, H, W, C) images -> (B, P, d) patch tokens with positional embedding.

        Inputs at a size other than ``image_size`` get a bilinearly resized
        positional grid.
        """
        x = _to_batch(images).to(self.pos_embed.dtype)
        B, H, W, C = x.shape
        p = self.config.patch_size
        if C != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} channels, got {C}")
        if H % p or W % p:
            raise ShapeError(f"image {H}x{W} not divisible by patch size {p}")
        gh, gw = H // p, W // p
        x = (x - self.config.pixel_mean) / self.config.pixel_std
        patches = x.reshape(B, gh, p, gw, p, C).permute(0, 1, 3, 2, 4, 5).reshape(B, gh * gw, p * p * C)
        return self.patch_proj(patches) + self._pos_embed(gh, gw)

    def forward(self, images, hard: bool | None = None, gumbel: bool = False) -> EncoderOutput:
        hard = self.config.hard if hard is None else hard
        x = self.patchify(images)
        B = x.shape[0]
        composed = None
        stage_maps = []
        for blocks, grouper, groups in zip(self.stage_blocks, self.groupers, self.group_tokens):
            G = groups.shape[1]
            z = torch.cat([x, groups.expand(B, -1, -1)], dim=1)
            for blk in blocks:
                z = blk(z)
            x, assign = grouper(z[:, :-G], z[:, -G:], hard=hard, gumbel=gumbel)
            stage_maps.append(assign)
            composed = assign if composed is None else composed @ assign
        for blk in self.tail:
            x = blk(x)
        return EncoderOutput(self.norm(x), composed, stage_maps)


def encode(view, encoder: GroupEncoder, hard: bool | None = None) -> EncoderOutput:
    """Segment tokens and composed patch-to-segment map for one image or a batch."""
    return encoder(view, hard=hard)


def compose_assignments(maps: Sequence[torch.Tensor]) -> torch.Tensor:
    out = maps[0]
    for m in maps[1:]:
        out = out @ m
    return out
