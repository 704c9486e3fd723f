"""Frozen hierarchical trunk with bottleneck adapters, prompt tokens and LoRA.

The trunk is a ConvNeXt-style stand-in: a stride-4 patchify stem, stride-2
downsampling between stages, and residual blocks of depthwise 3x3 ->
pointwise expand -> GELU -> pointwise project. Trunk weights come from a
seeded generator and never receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, DWConv2d, Module, Parameter
from .tensor import Rng, Tensor

STAGE_NAMES = ("C2", "C3", "C4", "C5")
STAGE_STRIDES = (4, 8, 16, 32)


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    stage_channels: tuple = field(default=(32, 64, 128, 256), metadata={"help": "trunk widths of C2..C5 (desk default)"})
    blocks_per_stage: tuple = field(default=(1, 1, 2, 1), metadata={"help": "residual blocks per stage"})
    lora_r: int = field(default=24, metadata={"help": "LoRA rank (published default 24)"})
    lora_alpha: float = field(default=48.0, metadata={"help": "LoRA scale numerator, branch scale = alpha/r (published default 48)"})
    lora_dropout: float = field(default=0.1, metadata={"help": "dropout on the LoRA branch input (published default 0.1)"})
    lora_blocks: int = field(default=4, metadata={"help": "number of trailing blocks whose pointwise layers get LoRA"})
    adapter_reduction: int = field(default=4, metadata={"help": "bottleneck adapter reduction ratio"})
    prompt_count: int = field(default=20, metadata={"help": "learnable prompt tokens (published default 20)"})
    expand_ratio: int = field(default=4, metadata={"help": "pointwise expansion inside trunk blocks"})
    init_seed: int = field(default=0, metadata={"help": "seed for frozen trunk and plug-in initialisation"})

    def validate(self):
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ConfigError("stage_channels and blocks_per_stage need 4 entries (C2..C5)")
        if any(c < 1 for c in self.stage_channels) or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError("stage widths and block counts must be positive")
        if self.lora_r < 1:
            raise ConfigError(f"lora_r must be >= 1, got {self.lora_r}")
        if self.lora_alpha <= 0:
            raise ConfigError(f"lora_alpha must be > 0, got {self.lora_alpha}")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError(f"lora_dropout must be in [0, 1), got {self.lora_dropout}")
        if self.adapter_reduction < 1 or self.prompt_count < 0:
            raise ConfigError("adapter_reduction must be >= 1 and prompt_count >= 0")
        for c in self.stage_channels:
            if c // self.adapter_reduction < 1:
                raise ConfigError(f"adapter_reduction {self.adapter_reduction} leaves no width for {c} channels")


class BottleneckAdapter(Module):
    """y = x + s * Up(GELU(Down(x))), with the gate s starting at zero."""

    def __init__(self, channels: int, reduction: int, rng: Rng):
        hidden = channels // reduction
        self.channels = channels
        self.down = Parameter(rng.normal((hidden, channels, 1, 1), scale=channels ** -0.5), "adapter")
        self.up = Parameter(rng.normal((channels, hidden, 1, 1), scale=hidden ** -0.5), "adapter")
        self.gate = Parameter(np.zeros(1), "adapter")

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise T.DimensionError(f"adapter expects {self.channels} channels, got input {x.shape}")
        h = T.conv2d(T.gelu(T.conv2d(x, self.down)), self.up)
        return x + T.reshape(self.gate, (1, 1, 1, 1)) * h


class LoRAConv1x1(Module):
    """Frozen 1x1 host W0 (d x k) plus a rank-r update (alpha/r) * B A.

    A is (r, k) with small random init, B is (d, r) and starts at zero.
    """

    def __init__(self, host: Conv2d, r: int, alpha: float, dropout: float, rng: Rng):
        d, k = host.weight.shape[:2]
        if r > min(d, k):
            raise ConfigError(f"LoRA rank {r} exceeds min(d, k) = {min(d, k)} of a {d}x{k} host")
        self.host = host
        self.r, self.alpha, self.dropout = r, float(alpha), dropout
        self.A = Parameter(rng.normal((r, k, 1, 1), scale=k ** -0.5), "lora")
        self.B = Parameter(np.zeros((d, r, 1, 1)), "lora")

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def __call__(self, x: Tensor, rng: Rng | None = None, plain: bool = False) -> Tensor:
        if x.shape[1] != self.A.shape[1]:
            raise T.DimensionError(f"LoRA expects width {self.A.shape[1]}, got {x.shape[1]}")
        h = self.host(x)
        if plain:
            return h
        xin = T.dropout(x, self.dropout, self.training, rng)
        branch = T.conv2d(T.conv2d(xin, self.A), self.B)
        return h + branch * self.scale


class PromptTokens(Module):
    """P learned tokens of C2 width, carried to later stages by per-stage projections.

    At stage s the tokens are mapped by ``proj[s]`` (identity-initialised for
    C2); their mean is broadcast-added to every position of the stage output,
    and the projected tokens become the input tokens of the next stage.
    """

    def __init__(self, count: int, widths: tuple, rng: Rng):
        self.count = count
        self.tokens = Parameter(np.zeros((count, widths[0])), "prompt")
        projs = [Parameter(np.eye(widths[0]), "prompt")]
        for cin, cout in zip(widths[:-1], widths[1:]):
            projs.append(Parameter(rng.normal((cout, cin), scale=cin ** -0.5), "prompt"))
        self.proj = projs

    def inject(self, features: list) -> list:
        """Add the stage vectors to each feature map in ``features`` (stages C2.. in order)."""
        if self.count == 0:
            return list(features)
        out = []
        tok = self.tokens
        for i, f in enumerate(features):
            tok, f = self.step(tok, i, f)
            out.append(f)
        return out

    def step(self, tok: Tensor, stage: int, feature: Tensor):
        """Project ``tok`` into stage ``stage`` and add the token mean to ``feature``."""
        tok = T.matmul(tok, T.transpose(self.proj[stage], (1, 0)))
        if feature.shape[1] != tok.shape[1]:
            raise T.DimensionError(f"prompt projection width {tok.shape[1]} != stage width {feature.shape[1]}")
        return tok, feature + T.reshape(T.reduce_mean(tok, axis=0), (1, -1, 1, 1))


class TrunkBlock(Module):
    def __init__(self, c: int, expand: int, rng: Rng):
        self.dw = DWConv2d(c, 3, rng, "frozen")
        self.pw1 = Conv2d(c, c * expand, 1, rng, "frozen", gain=2 ** 0.5)
        self.pw2 = Conv2d(c * expand, c, 1, rng, "frozen", gain=0.5)
        self.lora1 = None
        self.lora2 = None
        self.adapter = None

    def attach_lora(self, r, alpha, dropout, rng: Rng):
        self.lora1 = LoRAConv1x1(self.pw1, r, alpha, dropout, rng)
        self.lora2 = LoRAConv1x1(self.pw2, r, alpha, dropout, rng)

    def __call__(self, x: Tensor, rng: Rng | None = None, plain: bool = False) -> Tensor:
        h = self.dw(x)
        h = self.lora1(h, rng, plain) if self.lora1 is not None else self.pw1(h)
        h = T.gelu(h)
        h = self.lora2(h, rng, plain) if self.lora2 is not None else self.pw2(h)
        if not plain and self.adapter is not None:
            h = self.adapter(h)
        return x + h


class Stage(Module):
    def __init__(self, blocks: list):
        self.blocks = blocks

    def __iter__(self):
        return iter(self.blocks)

    def __len__(self):
        return len(self.blocks)


class Backbone(Module):
    """Siamese encoder: the same instance (one parameter set) serves both dates."""

    def __init__(self, cfg: BackboneConfig):
        cfg.validate()
        self.cfg = cfg
        root = Rng(cfg.init_seed)
        trunk_rng, plug_rng = root.child(1), root.child(2)
        ch = cfg.stage_channels
        self.stem = Conv2d(3, ch[0], 4, trunk_rng, "frozen", stride=4)
        self.downsample = [Conv2d(ch[i - 1], ch[i], 2, trunk_rng, "frozen", stride=2) for i in range(1, 4)]
        self.stages = []
        for i in range(4):
            self.stages.append(Stage([TrunkBlock(ch[i], cfg.expand_ratio, trunk_rng)
                                      for _ in range(cfg.blocks_per_stage[i])]))
        # plug-ins draw from their own stream so the trunk is independent of plug-in settings
        for i in range(4):
            for blk in self.stages[i]:
                blk.adapter = BottleneckAdapter(ch[i], cfg.adapter_reduction, plug_rng)
        flat = [blk for stage in self.stages for blk in stage]
        for blk in flat[max(len(flat) - cfg.lora_blocks, 0):]:
            blk.attach_lora(cfg.lora_r, cfg.lora_alpha, cfg.lora_dropout, plug_rng)
        self.prompts = PromptTokens(cfg.prompt_count, tuple(ch[:3]), plug_rng)

    @property
    def channels(self):
        return self.cfg.stage_channels

    def lora_modules(self):
        return [m for stage in self.stages for blk in stage for m in (blk.lora1, blk.lora2) if m is not None]

    def __call__(self, image: Tensor, rng: Rng | None = None, plain: bool = False) -> dict:
        """Return {'C2'..'C5'} feature maps; ``plain`` runs the frozen trunk alone."""
        n, c, h, w = image.shape
        if c != 3:
            raise T.DimensionError(f"backbone expects 3-channel images, got {c}")
        if h % 32 or w % 32:
            raise T.DimensionError(f"input height and width must be multiples of 32, got {h}x{w}")
        feats = {}
        x = self.stem(image)
        tok = None if plain or self.prompts.count == 0 else self.prompts.tokens
        for i in range(4):
            if i > 0:
                x = self.downsample[i - 1](x)
            for blk in self.stages[i]:
                x = blk(x, rng, plain)
            if tok is not None and i < 3:
                tok, x = self.prompts.step(tok, i, x)
            feats[STAGE_NAMES[i]] = x
        return feats


def count_lora_params(backbone: Backbone) -> int:
    return sum(m.A.size + m.B.size for m in backbone.lora_modules())


def lora_slope(backbone: Backbone) -> int:
    """Sum of (d + k) over every LoRA-adapted matrix: LoRA params per unit of rank."""
    return sum(m.host.weight.shape[0] + m.host.weight.shape[1] for m in backbone.lora_modules())
