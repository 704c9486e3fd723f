"""Residual context refiner, self-gating and the upsampling classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, DWConv2d, Module
from .tensor import Rng, Tensor


@dataclass
class DecoderConfig:
    num_classes: int = field(default=7, metadata={"help": "output classes K+1 including no-change (default six change classes)"})
    enhancer_depth: int = field(default=3, metadata={"help": "residual refinement units (fixed)"})

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2 (K >= 1), got {self.num_classes}")
        if self.enhancer_depth != 3:
            raise ValueError("enhancer_depth is fixed at 3")


class ResidualUnit(Module):
    """Y = X + BN(GELU(DW3x3(Conv3x3(X))))."""

    def __init__(self, dim: int, rng: Rng):
        self.conv = Conv2d(dim, dim, 3, rng, "decoder", pad=1)
        self.dw = DWConv2d(dim, 3, rng, "decoder")
        self.bn = BatchNorm2d(dim, "decoder")

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.bn(T.gelu(self.dw(self.conv(x))))


def attention_gate(y: Tensor) -> Tensor:
    """F = sigmoid(Y) * Y, elementwise."""
    return T.sigmoid(y) * y


class DecoderHead(Module):
    def __init__(self, dim: int, cfg: DecoderConfig, rng: Rng, gate: bool = True):
        cfg.validate()
        self.dim = dim
        self.num_classes = cfg.num_classes
        self.gate = gate
        self.units = [ResidualUnit(dim, rng) for _ in range(cfg.enhancer_depth)]
        self.proj = Conv2d(dim, dim, 1, rng, "decoder")
        self.classifier = Conv2d(dim, cfg.num_classes, 1, rng, "decoder")

    def context_enhance(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.dim:
            raise T.DimensionError(f"decoder expects {self.dim} channels, got {x.shape[1]}")
        for unit in self.units:
            x = unit(x)
        return self.proj(x)

    def classify_and_upsample(self, f: Tensor, factor: int = 4) -> Tensor:
        return T.upsample_bilinear(self.classifier(f), factor)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.context_enhance(x)
        f = attention_gate(y) if self.gate else y
        return self.classify_and_upsample(f)
