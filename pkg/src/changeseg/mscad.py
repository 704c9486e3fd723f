"""Multi-scale difference fusion.

C3, C4 and C5 are projected to a shared width, upsampled to the C2 grid and
blended with per-position softmax weights over the three scales. The two
dates' fused maps are then compared twice, by an absolute difference and by a
small learned conv stack, and the two cues are aggregated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Rng, Tensor


@dataclass
class MSCADConfig:
    common_dim: int = field(default=64, metadata={"help": "shared fusion width (published 256, desk default 64)"})
    num_scales: int = field(default=3, metadata={"help": "fused scales C3..C5 (fixed)"})

    def validate(self):
        if self.common_dim < 1:
            raise ValueError(f"common_dim must be >= 1, got {self.common_dim}")
        if self.num_scales != 3:
            raise ValueError("num_scales is fixed at 3")


@dataclass
class Ablation:
    """Sub-path switches; True keeps the component."""

    ms_att: bool = True
    diff_ada: bool = True
    diff_agg: bool = True
    dec_att: bool = True


def diff_direct(f1: Tensor, f2: Tensor) -> Tensor:
    if f1.shape != f2.shape:
        raise T.DimensionError(f"diff_direct: shapes {f1.shape} and {f2.shape} differ")
    return T.abs(f1 - f2)


class ScaleFusion(Module):
    """Project, upsample and softmax-blend C3..C5 at C2 resolution."""

    def __init__(self, in_channels: tuple, dim: int, rng: Rng, attention: bool = True):
        self.proj = [Conv2d(c, dim, 1, rng, "mscad") for c in in_channels]
        self.att = Conv2d(dim * len(in_channels), len(in_channels), 1, rng, "mscad") if attention else None

    def align(self, feats: list, target_hw: tuple) -> list:
        aligned = []
        for f, proj in zip(feats, self.proj):
            th, tw = target_hw
            if th % f.shape[2] or tw % f.shape[3] or th // f.shape[2] != tw // f.shape[3]:
                raise T.DimensionError(f"cannot upsample {f.shape[2:]} to {target_hw} by an integer factor")
            aligned.append(T.upsample_bilinear(proj(f), th // f.shape[2]))
        return aligned

    def weights(self, aligned: list) -> Tensor:
        """Per-position scale weights (N, 3, H, W); uniform when attention is off."""
        if self.att is None:
            n, _, h, w = aligned[0].shape
            return T.Tensor(np.full((n, len(aligned), h, w), 1.0 / len(aligned), dtype=aligned[0].dtype))
        return T.softmax(self.att(T.concat(aligned, axis=1)), axis=1)

    def __call__(self, c3: Tensor, c4: Tensor, c5: Tensor, target_hw: tuple) -> Tensor:
        n = c3.shape[0]
        if c4.shape[0] != n or c5.shape[0] != n:
            raise T.DimensionError("align_and_fuse: batch sizes differ across scales")
        if not (c3.shape[2] == 2 * c4.shape[2] == 4 * c5.shape[2]):
            raise T.DimensionError(f"align_and_fuse: expected strides 8/16/32, got {c3.shape[2:]}, {c4.shape[2:]}, {c5.shape[2:]}")
        aligned = self.align([c3, c4, c5], target_hw)
        a = self.weights(aligned)
        fused = None
        for i, x in enumerate(aligned):
            term = a[:, i:i + 1] * x
            fused = term if fused is None else fused + term
        return fused


class AdaptiveDiff(Module):
    """concat[f1; f2] -> 3x3 conv -> BN -> GELU -> 1x1 conv."""

    def __init__(self, dim: int, rng: Rng):
        self.conv3 = Conv2d(2 * dim, dim, 3, rng, "mscad", pad=1)
        self.bn = BatchNorm2d(dim, "mscad")
        self.conv1 = Conv2d(dim, dim, 1, rng, "mscad")

    def __call__(self, f1: Tensor, f2: Tensor) -> Tensor:
        if f1.shape != f2.shape:
            raise T.DimensionError(f"diff_adaptive: shapes {f1.shape} and {f2.shape} differ")
        return self.conv1(T.gelu(self.bn(self.conv3(T.concat([f1, f2], axis=1)))))


class Aggregator(Module):
    """concat[D_dir; D_ada] -> 1x1 conv -> BN -> GELU (or D_dir alone when ``inputs`` is 1)."""

    def __init__(self, dim: int, rng: Rng, inputs: int = 2):
        self.conv = Conv2d(inputs * dim, dim, 1, rng, "mscad")
        self.bn = BatchNorm2d(dim, "mscad")

    def __call__(self, *diffs: Tensor) -> Tensor:
        ref = diffs[0].shape
        if any(d.shape != ref for d in diffs):
            raise T.DimensionError("aggregate: difference maps must share a shape")
        x = diffs[0] if len(diffs) == 1 else T.concat(list(diffs), axis=1)
        return T.gelu(self.bn(self.conv(x)))


class MSCAD(Module):
    def __init__(self, in_channels: tuple, cfg: MSCADConfig, rng: Rng, ablation: Ablation | None = None):
        cfg.validate()
        ab = ablation or Ablation()
        self.cfg, self.ablation = cfg, ab
        dim = cfg.common_dim
        self.fusion = ScaleFusion(in_channels, dim, rng, attention=ab.ms_att)
        self.diff_ada = AdaptiveDiff(dim, rng) if ab.diff_ada else None
        if ab.diff_agg:
            self.aggregate = Aggregator(dim, rng, inputs=2 if ab.diff_ada else 1)
            self.ada_proj = None
        else:
            self.aggregate = None
            # without the aggregator D_out = D_dir + 1x1(D_ada), or D_dir alone
            self.ada_proj = Conv2d(dim, dim, 1, rng, "mscad") if ab.diff_ada else None

    def fuse(self, feats: dict) -> Tensor:
        target = feats["C2"].shape[2:]
        return self.fusion(feats["C3"], feats["C4"], feats["C5"], target)

    def difference(self, f1: Tensor, f2: Tensor) -> Tensor:
        d_dir = diff_direct(f1, f2)
        d_ada = self.diff_ada(f1, f2) if self.diff_ada is not None else None
        if self.aggregate is not None:
            return self.aggregate(d_dir, d_ada) if d_ada is not None else self.aggregate(d_dir)
        if self.ada_proj is not None:
            return d_dir + self.ada_proj(d_ada)
        return d_dir

    def __call__(self, feats1: dict, feats2: dict) -> Tensor:
        return self.difference(self.fuse(feats1), self.fuse(feats2))
