"""Full siamese change-detection network."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .decoder import DecoderConfig, DecoderHead
from .mscad import MSCAD, Ablation, MSCADConfig
from .nn import Module
from .tensor import Rng, Tensor

# ImageNet statistics; inputs are 8-bit RGB
_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32).reshape(1, 3, 1, 1)
_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32).reshape(1, 3, 1, 1)


def normalize_images(images: np.ndarray, dtype=np.float32) -> Tensor:
    """(N, H, W, 3) uint8 -> normalised (N, 3, H, W) tensor."""
    x = images.astype(np.float32).transpose(0, 3, 1, 2) / 255.0
    return Tensor(((x - _MEAN) / _STD).astype(dtype))


class ChangeNet(Module):
    def __init__(self, backbone_cfg: BackboneConfig, mscad_cfg: MSCADConfig, decoder_cfg: DecoderConfig,
                 ablation: Ablation | None = None):
        self.ablation = ablation or Ablation()
        self.backbone = Backbone(backbone_cfg)
        head_rng = Rng(backbone_cfg.init_seed).child(3)
        self.mscad = MSCAD(tuple(backbone_cfg.stage_channels[1:]), mscad_cfg, head_rng, self.ablation)
        self.decoder = DecoderHead(mscad_cfg.common_dim, decoder_cfg, head_rng, gate=self.ablation.dec_att)

    @property
    def num_classes(self) -> int:
        return self.decoder.num_classes

    def encode(self, t1: Tensor, t2: Tensor, rng: Rng | None = None):
        # one pass over the stacked pair; the trunk has no batch coupling
        n = t1.shape[0]
        feats = self.backbone(T.concat([t1, t2], axis=0), rng)
        f1 = {k: v[:n] for k, v in feats.items()}
        f2 = {k: v[n:] for k, v in feats.items()}
        return f1, f2

    def __call__(self, t1: Tensor, t2: Tensor, rng: Rng | None = None) -> Tensor:
        n = t1.shape[0]
        # scale fusion has no batch coupling either, so both dates share one pass
        fused = self.mscad.fuse(self.backbone(T.concat([t1, t2], axis=0), rng))
        return self.decoder(self.mscad.difference(fused[:n], fused[n:]))

    def predict(self, t1: Tensor, t2: Tensor) -> np.ndarray:
        was = self.training
        self.eval()
        with T.no_grad():
            logits = self(t1, t2)
        self.train(was)
        return logits.data.argmax(axis=1)
