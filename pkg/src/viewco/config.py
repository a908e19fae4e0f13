"""Run configuration: dataclasses plus a flat ``key = value`` file format.

Nested sections are addressed with dotted keys (``encoder.patch_size``,
``aug.flip_prob``). Tuple values are comma separated, except prompt templates
which are separated by ``|``. An optional ``preset`` (``toy`` or ``large``)
must be the first key; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .text import PromptSet, TextConfig

LOSS_MODES = ("viewco", "single_view")


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.95
    use_trained_tau: bool = True
    short_side: int = 0  # 0: evaluate at the encoder's training size
    eval_seed: int = 12345


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 5
    warmup_epochs: int = 1
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    ema_alpha: float = 0.99
    seed: int = 0
    tau_init: float = 0.07
    per_loss_temperature: bool = False
    loss_mode: str = "viewco"
    grad_clip: float = 5.0
    dtype: str = "float32"
    embed_dim: int = 32
    proj_hidden: int = 64
    dataset: str = "data"
    checkpoint: str = "checkpoint.vwct"
    metrics_log: str = "metrics.tsv"
    eval_interval: int = 0  # steps between intermediate checkpoints, 0 = end only
    hard_after_step: int = 0  # soft assignment before this step, hard from it on
    gumbel_noise: bool = True  # perturb the student's assignment logits while training
    encoder: EncoderConfig = field(default_factory=EncoderConfig.toy)
    text: TextConfig = field(default_factory=TextConfig.toy)
    aug: AugConfig = field(default_factory=AugConfig)
    prompts: PromptSet = field(default_factory=PromptSet)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.ema_alpha < 1:
            raise ConfigError("ema_alpha must lie in [0, 1)")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be non-negative")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup_epochs must be smaller than epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not 0 < self.eval.threshold < 1:
            raise ConfigError("eval.threshold must lie in (0, 1)")
        if self.hard_after_step < 0:
            raise ConfigError("hard_after_step must be non-negative")
        if self.tau_init <= 0:
            raise ConfigError("tau_init must be positive")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def large(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=4096, epochs=30, warmup_epochs=5, base_lr=0.0016, weight_decay=0.05,
                    embed_dim=256, proj_hidden=4096, encoder=EncoderConfig.large(), text=TextConfig.large(),
                    eval=EvalConfig(short_side=448))
        base.update(overrides)
        return cls(**base)


SECTIONS = ("encoder", "text", "aug", "prompts", "eval")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        sep = "|" if value and isinstance(value[0], str) else ", "
        return sep.join(_format(v) for v in value)
    return str(value)


def _parse(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if key == "prompts.templates":
                return tuple(t.strip() for t in raw.split("|"))
            elem = type(default[0]) if default else int
            return tuple(elem(p.strip()) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def flatten(cfg: TrainConfig) -> dict[str, object]:
    out: dict[str, object] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in SECTIONS:
            for sf in dataclasses.fields(value):
                out[f"{f.name}.{sf.name}"] = getattr(value, sf.name)
        else:
            out[f.name] = value
    return out


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in flatten(cfg).items())


def parse_config(text: str) -> TrainConfig:
    entries: list[tuple[str, str]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        entries.append((k.strip(), v.strip()))
    base = TrainConfig()
    if entries and entries[0][0] == "preset":
        preset = entries.pop(0)[1]
        if preset not in ("toy", "large"):
            raise ConfigError(f"unknown preset {preset!r}")
        base = TrainConfig.large() if preset == "large" else TrainConfig.toy()
    flat = flatten(base)
    for k, v in entries:
        if k not in flat:
            raise ConfigError(f"unknown config key {k!r}")
        flat[k] = _parse(v, flat[k], k)
    top = {k: v for k, v in flat.items() if "." not in k}
    for section in SECTIONS:
        cls = type(getattr(base, section))
        top[section] = cls(**{k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith(section + ".")})
    return TrainConfig(**top)


def load_config(path) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(p.read_text(encoding="utf-8"))
