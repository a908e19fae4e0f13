"""Closed-vocabulary tokenizer, small text transformer and prompt templates."""
from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

from .encoder import Block
from .errors import AmbiguousCaption, ConfigError, EmptyText, FormatError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
DEFAULT_TEMPLATES = ("a photo of a {}.", "a picture of a {}.", "an image of a {}.")


def words(text: str) -> list[str]:
    """Lowercase whitespace split; surrounding punctuation is stripped from each word."""
    out = []
    for w in text.lower().split():
        w = w.strip(string.punctuation)
        if w:
            out.append(w)
    return out


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.token_to_id: dict[str, int] = {s: i for i, s in enumerate(SPECIALS)}
        for tok in tokens:
            if tok not in self.token_to_id:
                self.token_to_id[tok] = len(self.token_to_id)
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        return cls(sorted({w for t in texts for w in words(t)}))

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, word: str) -> bool:
        return word in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.token_to_id == other.token_to_id

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}\n" for tok, i in self.token_to_id.items()]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        vocab = cls()
        mapping = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            try:
                tok, idx = line.split("\t")
                mapping[tok] = int(idx)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: expected 'token<TAB>id'") from exc
        if sorted(mapping.values()) != list(range(len(mapping))):
            raise FormatError("vocabulary ids must be dense from 0")
        if any(mapping.get(s) != i for i, s in enumerate(SPECIALS)):
            raise FormatError("special tokens must occupy ids 0-3")
        vocab.token_to_id = mapping
        vocab.id_to_token = {i: t for t, i in mapping.items()}
        return vocab


def tokenize(text: str, vocab: Vocab, max_len: int) -> list[int]:
    if max_len < 3:
        raise ConfigError("max_len must be at least 3")
    ws = words(text)
    if not ws:
        raise EmptyText("cannot tokenize empty text")
    ids = [BOS] + [vocab.token_to_id.get(w, UNK) for w in ws[:max_len - 2]] + [EOS]
    return ids + [PAD] * (max_len - len(ids))


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        out.append(vocab.id_to_token[i])
    return " ".join(out)


def tokenize_batch(texts: Sequence[str], vocab: Vocab, max_len: int) -> torch.Tensor:
    return torch.tensor([tokenize(t, vocab, max_len) for t in texts], dtype=torch.long)


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int = 64
    width: int = 32
    layers: int = 2
    heads: int = 2
    max_len: int = 12
    out_dim: int = 32
    mlp_ratio: float = 2.0

    @classmethod
    def toy(cls, **overrides) -> "TextConfig":
        return cls(**overrides)

    @classmethod
    def large(cls, **overrides) -> "TextConfig":
        base = dict(vocab_size=49408, width=256, layers=12, heads=4, max_len=77, out_dim=256, mlp_ratio=4.0)
        base.update(overrides)
        return cls(**base)


class TextEncoder(nn.Module):
    """Transformer over token embeddings; the EOS hidden state is the sentence vector."""

    def __init__(self, config: TextConfig):
        super().__init__()
        self.config = config
        self.token_embed = nn.Embedding(config.vocab_size, config.width)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        self.pos_embed = nn.Parameter(torch.randn(config.max_len, config.width) * 0.01)
        self.blocks = nn.ModuleList([Block(config.width, config.heads, config.mlp_ratio)
                                     for _ in range(config.layers)])
        self.norm = nn.LayerNorm(config.width)
        self.proj = nn.Linear(config.width, config.out_dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.dim() == 1:
            ids = ids[None]
        keep = ids != PAD
        if not bool(keep.any(dim=1).all()):
            raise EmptyText("sequence contains only padding")
        L = ids.shape[1]
        if L > self.config.max_len:
            # trailing padding beyond the positional table is inert
            if bool(keep[:, self.config.max_len:].any()):
                raise ConfigError(f"sequence longer than max_len={self.config.max_len}")
            ids, keep, L = ids[:, :self.config.max_len], keep[:, :self.config.max_len], self.config.max_len
        x = self.token_embed(ids) + self.pos_embed[:L]
        for blk in self.blocks:
            x = blk(x, key_mask=keep)
        # EOS position, or the last real token when truncation dropped the EOS
        eos = (ids == EOS).to(torch.long)
        last = keep.to(torch.long).sum(dim=1) - 1
        pos = torch.where(eos.any(dim=1), eos.argmax(dim=1), last)
        h = x[torch.arange(ids.shape[0]), pos]
        return self.proj(self.norm(h))


def encode_text(ids, encoder: TextEncoder) -> torch.Tensor:
    return encoder(torch.as_tensor(ids))


@dataclass(frozen=True)
class PromptSet:
    templates: tuple[str, ...] = DEFAULT_TEMPLATES

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        if not self.templates:
            raise ConfigError("need at least one prompt template")
        for t in self.templates:
            if t.count("{}") != 1:
                raise ConfigError(f"template {t!r} must contain exactly one '{{}}' slot")

    @property
    def M(self) -> int:
        return len(self.templates)


def generate_prompts(class_word: str, prompts: PromptSet = PromptSet()) -> list[str]:
    if not class_word or not class_word.strip():
        raise EmptyText("class word is empty")
    return [t.format(class_word) for t in prompts.templates]


def extract_class_word(caption: str, known_classes: Iterable[str]) -> str:
    known = set(known_classes)
    found = [w for w in words(caption) if w in known]
    if len(found) != 1:
        raise AmbiguousCaption(f"expected one class word in {caption!r}, found {found}")
    return found[0]
