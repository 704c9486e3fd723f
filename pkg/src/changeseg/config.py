"""Flat key=value run configuration.

Every dataclass field of the component configs is one key. Unknown keys are
rejected. ``Config.hash`` is a stable 64-bit digest of the canonical text.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .data import AugmentationConfig
from .decoder import DecoderConfig
from .losses import LossConfig
from .mscad import Ablation, MSCADConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = field(default=3e-4, metadata={"help": "AdamW base learning rate (published 3e-4)"})
    weight_decay: float = field(default=0.01, metadata={"help": "decoupled weight decay (published 0.01)"})
    beta1: float = field(default=0.9, metadata={"help": "AdamW beta1 (published 0.9)"})
    beta2: float = field(default=0.999, metadata={"help": "AdamW beta2 (published 0.999)"})
    adam_eps: float = field(default=1e-8, metadata={"help": "AdamW epsilon"})
    epochs: int = field(default=200, metadata={"help": "training epochs (published 200)"})
    batch: int = field(default=4, metadata={"help": "batch size (published 4)"})
    max_steps: int = field(default=0, metadata={"help": "stop after this many optimizer steps (0 = no limit)"})
    t0: float = field(default=30.0, metadata={"help": "first warm-restart cycle length in epochs (published 30)"})
    t_mult: float = field(default=2.0, metadata={"help": "cycle length multiplier (published 2)"})
    eta_min: float = field(default=1e-7, metadata={"help": "cosine floor (published 1e-7)"})
    lr_mult_adapter: float = field(default=20.0, metadata={"help": "LR multiplier for adapters (published 20)"})
    lr_mult_prompt: float = field(default=20.0, metadata={"help": "LR multiplier for prompt tokens (published 20)"})
    lr_mult_lora: float = field(default=1.0, metadata={"help": "LR multiplier for LoRA factors"})
    lr_mult_mscad: float = field(default=8.0, metadata={"help": "LR multiplier for the difference-fusion module"})
    lr_mult_decoder: float = field(default=8.0, metadata={"help": "LR multiplier for the decoder head (published 8)"})
    ablate_ms_att: bool = field(default=False, metadata={"help": "replace scale attention by uniform 1/3 weights"})
    ablate_diff_ada: bool = field(default=False, metadata={"help": "drop the learned temporal difference"})
    ablate_diff_agg: bool = field(default=False, metadata={"help": "drop the difference aggregator"})
    ablate_dec_att: bool = field(default=False, metadata={"help": "drop the decoder sigmoid gate"})
    seed: int = field(default=0, metadata={"help": "seed for shuffling, augmentation and dropout"})

    def validate(self):
        for name in ("lr_mult_adapter", "lr_mult_prompt", "lr_mult_lora", "lr_mult_mscad", "lr_mult_decoder"):
            if getattr(self, name) < 0:
                raise ConfigFileError(f"{name} must be non-negative")
        if self.epochs < 0 or self.batch < 1:
            raise ConfigFileError("epochs must be >= 0 and batch >= 1")
        if self.t0 <= 0 or self.t_mult < 1:
            raise ConfigFileError("t0 must be > 0 and t_mult >= 1")

    def ablation(self) -> Ablation:
        return Ablation(ms_att=not self.ablate_ms_att, diff_ada=not self.ablate_diff_ada,
                        diff_agg=not self.ablate_diff_agg, dec_att=not self.ablate_dec_att)

    def lr_multipliers(self) -> dict:
        return {"frozen": 0.0, "adapter": self.lr_mult_adapter, "prompt": self.lr_mult_prompt,
                "lora": self.lr_mult_lora, "mscad": self.lr_mult_mscad, "decoder": self.lr_mult_decoder}


_SECTIONS = ("backbone", "mscad", "decoder", "loss", "train", "aug")


@dataclass
class Config:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mscad: MSCADConfig = field(default_factory=MSCADConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)

    @staticmethod
    def keys() -> dict:
        """key -> (section, dataclasses.Field)."""
        out = {}
        for section in _SECTIONS:
            sub = Config.__dataclass_fields__[section].default_factory
            for f in dataclasses.fields(sub):
                if f.name in out:
                    raise RuntimeError(f"duplicate config key {f.name}")
                out[f.name] = (section, f)
        return out

    def get(self, key):
        section, _ = self.keys()[key]
        return getattr(getattr(self, section), key)

    def set(self, key: str, raw) -> None:
        table = self.keys()
        if key not in table:
            raise ConfigFileError(f"unknown config key {key!r}")
        section, f = table[key]
        obj = getattr(self, section)
        setattr(obj, key, _parse(raw, getattr(obj, key), key) if isinstance(raw, str) else raw)

    def validate(self) -> "Config":
        self.backbone.validate()
        self.mscad.validate()
        self.decoder.validate()
        self.loss.validate()
        self.train.validate()
        return self

    def to_text(self) -> str:
        lines = []
        for key in self.keys():
            lines.append(f"{key}={_format(self.get(key))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Config":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigFileError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg.set(key, value)
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def hash(self) -> int:
        digest = hashlib.sha256(self.to_text().encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")

    def copy(self) -> "Config":
        return Config.from_text(self.to_text())


def _parse(raw: str, current, key: str):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.split(","))
        return raw
    except ValueError:
        raise ConfigFileError(f"bad value {raw!r} for key {key}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def describe_keys() -> str:
    """One line per key: name, default, help."""
    cfg = Config()
    lines = []
    for key, (section, f) in Config.keys().items():
        lines.append(f"  {key:<18} default {_format(cfg.get(key)):<16} [{section}] {f.metadata.get('help', '')}")
    return "\n".join(lines)
