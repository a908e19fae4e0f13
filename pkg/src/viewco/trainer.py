"""Siamese training: student by AdamW, teacher by EMA of the student."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .config import TrainConfig, dump_config, parse_config
from .data import DatasetItem, ViewPair, augment_two_views, load_dataset
from .encoder import GroupEncoder
from .errors import CheckpointMismatch, NonFiniteObjective
from .losses import (LossBreakdown, ProjectionHead, Temperature, multilabel_prompt_loss, project_view,
                     seg_consistency_loss, single_view_text_loss, text_views_loss, total_loss)
from .numerics import l2_normalize, load_tensors, save_tensors
from .text import SPECIALS, TextEncoder, Vocab, extract_class_word, generate_prompts, tokenize_batch

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)


class ViewCoModel(nn.Module):
    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        self.student = GroupEncoder(config.encoder)
        self.teacher = copy.deepcopy(self.student)
        self.teacher.requires_grad_(False)
        self.text_encoder = TextEncoder(config.text)
        self.vision_head = ProjectionHead(config.encoder.embed_dim, config.embed_dim, config.proj_hidden)
        self.text_head = ProjectionHead(config.text.out_dim, config.embed_dim, config.proj_hidden)
        names = ("seg", "tv", "ml") if config.per_loss_temperature else ("shared",)
        self.temperatures = nn.ModuleDict({n: Temperature(config.tau_init) for n in names})

    def tau(self, loss: str = "shared") -> torch.Tensor:
        if "shared" in self.temperatures:
            return self.temperatures["shared"].tau
        return self.temperatures[loss].tau

    def clamp_temperatures(self) -> None:
        for t in self.temperatures.values():
            t.clamp_()

    def embed_text(self, ids: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.text_head(self.text_encoder(ids)))

    def trainable(self):
        """(name, param) pairs updated by the optimizer; the teacher is excluded."""
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("teacher.")]


@dataclass
class Batch:
    views_u: torch.Tensor  # (B, S, S, 3)
    views_v: torch.Tensor
    caption_ids: torch.Tensor  # (B, L)
    prompt_ids: torch.Tensor  # (B, M, L)


def make_batch(items: Sequence[DatasetItem], pairs: Sequence[ViewPair], classes, vocab: Vocab,
               config: TrainConfig, dtype=torch.float32) -> Batch:
    L = config.text.max_len
    prompts = [p for it in items
               for p in generate_prompts(extract_class_word(it.caption, classes), config.prompts)]
    M = config.prompts.M
    return Batch(
        torch.from_numpy(np.stack([p.view_u for p in pairs])).to(dtype),
        torch.from_numpy(np.stack([p.view_v for p in pairs])).to(dtype),
        tokenize_batch([it.caption for it in items], vocab, L),
        tokenize_batch(prompts, vocab, L).reshape(len(items), M, L),
    )


def compute_losses(model: ViewCoModel, batch: Batch, hard: bool | None = None) -> LossBreakdown:
    """Loss terms for one batch; ``hard`` overrides the encoders' assignment mode."""
    cfg = model.config
    g = cfg.gumbel_noise
    su = model.student(batch.views_u, hard=hard, gumbel=g)
    z_iu = project_view(su.segments, model.vision_head)
    z_t = model.embed_text(batch.caption_ids)
    if cfg.loss_mode == "single_view":
        zero = z_iu.new_zeros(())
        return total_loss(zero, single_view_text_loss(z_iu, z_t, model.tau("tv")), zero)
    sv = model.student(batch.views_v, hard=hard, gumbel=g)
    with torch.no_grad():
        tu = model.teacher(batch.views_u, hard=hard).segments
        tv = model.teacher(batch.views_v, hard=hard).segments
    seg = seg_consistency_loss(l2_normalize(tu), l2_normalize(tv), l2_normalize(su.segments),
                               l2_normalize(sv.segments), model.tau("seg"))
    z_iv = project_view(sv.segments, model.vision_head)
    B, M, L = batch.prompt_ids.shape
    z_p = model.embed_text(batch.prompt_ids.reshape(B * M, L)).reshape(B, M, -1)
    tvl = text_views_loss(z_iu, z_iv, z_t, model.tau("tv"))
    ml = multilabel_prompt_loss(z_iu, z_iv, z_p, model.tau("ml"))
    return total_loss(seg, tvl, ml)


@torch.no_grad()
def ema_update(teacher, student, alpha: float):
    """``teacher <- alpha * teacher + (1 - alpha) * student`` for every named tensor.

    Accepts modules or name->tensor mappings; teacher tensors are updated in
    place and the teacher is returned.
    """
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    t_params = dict(teacher.named_parameters()) if isinstance(teacher, nn.Module) else dict(teacher)
    s_params = dict(student.named_parameters()) if isinstance(student, nn.Module) else dict(student)
    if t_params.keys() != s_params.keys():
        raise CheckpointMismatch("teacher and student parameter names differ")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise CheckpointMismatch(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        # written as t + (1 - alpha)(s - t) so that t == s is an exact fixed point
        t.add_(s - t, alpha=1.0 - alpha)
    return teacher


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return 0.0
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def param_groups(named_params, weight_decay: float):
    """Weight decay on matrices only; biases, norm gains and log_tau are exempt."""
    decay, no_decay = [], []
    for _, p in named_params:
        (decay if p.dim() >= 2 else no_decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]


def decay_exempt(named_params) -> list[str]:
    return [n for n, p in named_params if p.dim() < 2]


@dataclass
class TrainState:
    model: ViewCoModel
    optimizer: torch.optim.Optimizer
    vocab: Vocab
    classes: tuple[str, ...]
    step: int = 0
    total_steps: int = 1
    warmup_steps: int = 0
    history: list = field(default_factory=list)

    @property
    def config(self) -> TrainConfig:
        return self.model.config


def _dtype(config: TrainConfig):
    return torch.float64 if config.dtype == "float64" else torch.float32


def init_state(config: TrainConfig, vocab: Vocab, classes, total_steps: int = 1,
               warmup_steps: int = 0) -> TrainState:
    if config.text.vocab_size != len(vocab):
        config = replace(config, text=replace(config.text, vocab_size=len(vocab)))
    torch.manual_seed(config.seed)
    model = ViewCoModel(config).to(_dtype(config))
    opt = torch.optim.AdamW(param_groups(model.trainable(), config.weight_decay), lr=config.base_lr,
                            betas=BETAS, eps=1e-8)
    return TrainState(model, opt, vocab, tuple(classes), 0, total_steps, warmup_steps)


def train_step(batch: Batch, state: TrainState, lr: float | None = None) -> tuple[TrainState, LossBreakdown]:
    cfg = state.config
    model = state.model
    if lr is None:
        lr = cosine_lr(state.step, state.total_steps, state.warmup_steps, cfg.base_lr)
    hard = cfg.encoder.hard and state.step >= cfg.hard_after_step
    breakdown = compute_losses(model, batch, hard)
    if not bool(torch.isfinite(breakdown.total)):
        raise NonFiniteObjective(f"non-finite loss at step {state.step}: {breakdown.as_floats()}")
    state.optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    params = [p for _, p in model.trainable()]
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    model.clamp_temperatures()
    ema_update(model.teacher, model.student, cfg.ema_alpha)
    state.step += 1
    detached = LossBreakdown(*(t.detach() for t in (breakdown.seg_consistency, breakdown.text_views,
                                                     breakdown.multilabel, breakdown.total)))
    state.history.append((lr, *detached.as_floats()))
    return state, detached


def format_metrics(step: int, lr: float, b: LossBreakdown) -> str:
    seg, tv, ml, total = b.as_floats()
    return f"{step}\t{lr:.9f}\t{seg:.9f}\t{tv:.9f}\t{ml:.9f}\t{total:.9f}\n"


# -- checkpoints ---------------------------------------------------------------


def vocab_path(checkpoint_path) -> Path:
    p = Path(checkpoint_path)
    return p.with_name(p.name + ".vocab.tsv")


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    config: TrainConfig
    step: int
    classes: tuple[str, ...] = ()

    @classmethod
    def from_state(cls, state: TrainState) -> "Checkpoint":
        model, opt = state.model, state.optimizer
        tensors: dict[str, torch.Tensor] = {}
        prefixes = {"student.": "student/", "teacher.": "teacher/", "text_encoder.": "text/",
                    "vision_head.": "vision_head/", "text_head.": "text_head/", "temperatures.": "temperature/"}
        for name, p in model.named_parameters():
            for src, dst in prefixes.items():
                if name.startswith(src):
                    tensors[dst + name[len(src):]] = p.detach().clone()
        names = {id(p): n for n, p in model.trainable()}
        for group in opt.param_groups:
            for p in group["params"]:
                st = opt.state.get(p)
                if st:
                    n = names[id(p)]
                    tensors[f"optim/{n}/exp_avg"] = st["exp_avg"].detach().clone()
                    tensors[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"].detach().clone()
                    tensors[f"optim/{n}/step"] = torch.as_tensor(float(st["step"]), dtype=torch.float64)
        tensors["meta/step"] = torch.tensor(float(state.step), dtype=torch.float64)
        tensors["meta/total_steps"] = torch.tensor(float(state.total_steps), dtype=torch.float64)
        tensors["meta/warmup_steps"] = torch.tensor(float(state.warmup_steps), dtype=torch.float64)
        tensors["meta/config"] = _text_tensor(dump_config(state.config))
        tensors["meta/classes"] = _text_tensor("\n".join(state.classes))
        return cls(tensors, state.config, state.step, state.classes)

    def save(self, path) -> None:
        save_tensors(path, self.tensors)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors = load_tensors(path)
        try:
            config = parse_config(_tensor_text(tensors["meta/config"]))
            step = int(tensors["meta/step"].item())
            classes = tuple(c for c in _tensor_text(tensors["meta/classes"]).split("\n") if c)
        except KeyError as exc:
            raise CheckpointMismatch(f"checkpoint lacks {exc}") from exc
        return cls(tensors, config, step, classes)

    def module_weights(self, prefix: str) -> dict[str, torch.Tensor]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def restore(self, vocab: Vocab | None = None) -> TrainState:
        """Rebuild model and optimizer state from the stored tensors."""
        config = self.config
        if vocab is None:
            vocab = Vocab(f"<tok{i}>" for i in range(config.text.vocab_size - len(SPECIALS)))
        if len(vocab) != config.text.vocab_size:
            raise CheckpointMismatch("vocabulary size does not match the checkpoint")
        state = init_state(config, vocab, self.classes)
        model = state.model
        prefixes = {"student/": "student.", "teacher/": "teacher.", "text/": "text_encoder.",
                    "vision_head/": "vision_head.", "text_head/": "text_head.", "temperature/": "temperatures."}
        params = dict(model.named_parameters())
        seen = set()
        for key, value in self.tensors.items():
            for src, dst in prefixes.items():
                if key.startswith(src):
                    name = dst + key[len(src):]
                    if name not in params or params[name].shape != value.shape:
                        raise CheckpointMismatch(f"checkpoint tensor {key} does not fit the model")
                    with torch.no_grad():
                        params[name].copy_(value)
                    seen.add(name)
        missing = set(params) - seen
        if missing:
            raise CheckpointMismatch(f"checkpoint is missing {sorted(missing)[:3]}...")
        named = dict(model.trainable())
        for name, p in named.items():
            key = f"optim/{name}/exp_avg"
            if key in self.tensors:
                state.optimizer.state[p] = {
                    "step": torch.tensor(float(self.tensors[f"optim/{name}/step"].item())),
                    "exp_avg": self.tensors[key].to(p.dtype).clone(),
                    "exp_avg_sq": self.tensors[f"optim/{name}/exp_avg_sq"].to(p.dtype).clone(),
                }
        state.step = self.step
        state.total_steps = int(self.tensors.get("meta/total_steps", torch.tensor(1.0)).item())
        state.warmup_steps = int(self.tensors.get("meta/warmup_steps", torch.tensor(0.0)).item())
        return state


def _text_tensor(text: str) -> torch.Tensor:
    return torch.tensor(list(text.encode("utf-8")), dtype=torch.float64)


def _tensor_text(t: torch.Tensor) -> str:
    return bytes(int(v) for v in t.tolist()).decode("utf-8")


def save_checkpoint(path, state: TrainState) -> Checkpoint:
    ckpt = Checkpoint.from_state(state)
    ckpt.save(path)
    state.vocab.save(vocab_path(path))
    return ckpt


def load_checkpoint(path) -> TrainState:
    ckpt = Checkpoint.load(path)
    vp = vocab_path(path)
    return ckpt.restore(Vocab.load(vp) if vp.is_file() else None)


# -- training loop ---------------------------------------------------------------


def corpus_vocab(captions: Sequence[str], classes: Sequence[str], config: TrainConfig) -> Vocab:
    texts = list(captions)
    for c in classes:
        texts.extend(generate_prompts(c, config.prompts))
    return Vocab.build(texts)


def aug_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def train(config: TrainConfig, dataset=None) -> TrainState:
    """Run ``config.epochs`` epochs and return the live training state.

    ``dataset`` may be passed preloaded; otherwise it is read from
    ``config.dataset``. Metrics and intermediate checkpoints are written as
    configured; the final checkpoint is left to the caller.
    """
    data = dataset if dataset is not None else load_dataset(config.dataset)
    items = data.items
    vocab = corpus_vocab([it.caption for it in items], data.classes, config)
    B = config.batch_size
    steps_per_epoch = math.ceil(len(items) / B)
    total = config.epochs * steps_per_epoch
    state = init_state(config, vocab, data.classes, max(total, 1), config.warmup_epochs * steps_per_epoch)
    dtype = _dtype(config)
    metrics = Path(config.metrics_log) if config.metrics_log else None
    if metrics is not None:
        metrics.parent.mkdir(parents=True, exist_ok=True)
        metrics.write_text("", encoding="utf-8")
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(items))
        for start in range(0, len(items), B):
            idx = order[start:start + B]
            chunk = [items[i] for i in idx]
            pairs = [augment_two_views(it.image, aug_seed(config.seed, epoch, int(i)), config.aug)
                     for it, i in zip(chunk, idx)]
            batch = make_batch(chunk, pairs, data.classes, vocab, config, dtype)
            lr = cosine_lr(state.step, state.total_steps, state.warmup_steps, config.base_lr)
            state, breakdown = train_step(batch, state, lr)
            if metrics is not None:
                with metrics.open("a", encoding="utf-8") as fh:
                    fh.write(format_metrics(state.step, lr, breakdown))
            if config.eval_interval and config.checkpoint and state.step % config.eval_interval == 0:
                save_checkpoint(config.checkpoint, state)
        if state.history:
            log.info("epoch %d: total loss %.4f", epoch, state.history[-1][-1])
    return state


def fit(config: TrainConfig, dataset=None) -> Checkpoint:
    """Train and write the final checkpoint (when ``config.checkpoint`` is set)."""
    state = train(config, dataset)
    if config.checkpoint:
        return save_checkpoint(config.checkpoint, state)
    return Checkpoint.from_state(state)
