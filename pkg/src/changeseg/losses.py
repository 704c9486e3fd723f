"""Focal, Dice and Lovasz-Softmax losses and their fixed-weight combination."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensor as T
from .tensor import Tensor


@dataclass
class LossConfig:
    w_focal: float = field(default=0.4, metadata={"help": "focal weight (published 0.4)"})
    w_dice: float = field(default=0.3, metadata={"help": "dice weight (published 0.3)"})
    w_lovasz: float = field(default=0.3, metadata={"help": "Lovasz-Softmax weight (published 0.3)"})
    focal_gamma: float = field(default=3.0, metadata={"help": "focal focusing factor (published 3)"})
    focal_alpha: str = field(default="ones", metadata={
        "help": "per-class focal weights: 'ones', 'inverse_freq' (from the training split) or comma list"})
    dice_eps: float = field(default=1e-5, metadata={"help": "dice smoothing term (published 1e-5)"})

    def validate(self):
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if self.dice_eps <= 0:
            raise ValueError("dice_eps must be > 0")
        w = (self.w_focal, self.w_dice, self.w_lovasz)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"loss weights must be non-negative and sum to 1, got {w}")

    def alpha_vector(self, num_classes: int, class_freq: np.ndarray | None = None) -> np.ndarray:
        spec = self.focal_alpha.strip().lower()
        if spec == "ones":
            a = np.ones(num_classes)
        elif spec == "inverse_freq":
            if class_freq is None:
                raise ValueError("focal_alpha=inverse_freq needs training-split class frequencies")
            freq = np.asarray(class_freq, dtype=np.float64)
            a = np.where(freq > 0, 1.0 / np.maximum(freq, 1e-12), 0.0)
            # normalise so the mean over present classes is 1; absent classes get weight 1
            present = freq > 0
            a[present] /= a[present].mean()
            a[~present] = 1.0
        else:
            a = np.array([float(v) for v in spec.split(",")])
            if a.size != num_classes:
                raise ValueError(f"focal_alpha lists {a.size} weights for {num_classes} classes")
        if np.any(a <= 0):
            raise ValueError("focal_alpha entries must be > 0")
        return a


class TargetError(ValueError):
    pass


def _check_target(logits: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise T.DimensionError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= c):
        raise TargetError(f"target values must lie in [0, {c}), got range [{target.min()}, {target.max()}]")
    return target.astype(np.int64)


def one_hot(target: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """(N, H, W) int -> (N, C, H, W) one-hot."""
    eye = np.eye(num_classes, dtype=dtype)
    return np.ascontiguousarray(eye[target].transpose(0, 3, 1, 2))


def focal_loss(logits: Tensor, target, gamma: float = 3.0, alpha=None) -> Tensor:
    """mean over pixels of -alpha_t (1 - p_t)^gamma log p_t."""
    target = _check_target(logits, target)
    c = logits.shape[1]
    oh = Tensor(one_hot(target, c, logits.dtype))
    logpt = T.reduce_sum(T.log_softmax(logits, axis=1) * oh, axis=1)
    pt = T.exp(logpt)
    per_pixel = -(T.power(1.0 - pt, gamma) * logpt)
    if alpha is not None:
        a = np.asarray(alpha, dtype=logits.dtype)
        per_pixel = per_pixel * Tensor(a[target])
    return T.reduce_mean(per_pixel)


def dice_loss(logits: Tensor, target, eps: float = 1e-5) -> Tensor:
    """Soft Dice per class over all pixels, averaged over the C classes."""
    target = _check_target(logits, target)
    c = logits.shape[1]
    oh = one_hot(target, c, logits.dtype)
    p = T.softmax(logits, axis=1)
    axes = (0, 2, 3)
    inter = T.reduce_sum(p * Tensor(oh), axis=axes)
    denom = T.reduce_sum(p * p, axis=axes) + Tensor(oh.sum(axis=axes))
    per_class = 1.0 - (2.0 * inter + eps) / (denom + eps)
    return T.reduce_mean(per_class)


def lovasz_from_probs(probs: Tensor, target: np.ndarray) -> Tensor:
    """Lovasz extension of the per-class Jaccard loss, averaged over present classes.

    ``probs`` is (N, C, H, W). Errors are sorted descending with ties kept in
    pixel order.
    """
    n, c, h, w = probs.shape
    p_flat = probs.data.transpose(1, 0, 2, 3).reshape(c, -1)
    t_flat = target.reshape(-1)
    present = [k for k in range(c) if np.any(t_flat == k)]
    grad_flat = np.zeros_like(p_flat, dtype=np.float64)
    total = 0.0
    for k in present:
        fg = (t_flat == k).astype(np.float64)
        diff = fg - p_flat[k].astype(np.float64)
        err = np.abs(diff)
        order = np.argsort(-err, kind="stable")
        g = _kernels.lovasz_grad(np.ascontiguousarray(fg[order]))
        total += float(np.dot(err[order], g))
        # d|fg - p| / dp = -sign(fg - p)
        grad_flat[k, order] = -np.sign(diff[order]) * g
    m = max(len(present), 1)
    value = np.asarray(total / m, dtype=probs.dtype)
    grad_nchw = (grad_flat / m).reshape(c, n, h, w).transpose(1, 0, 2, 3).astype(probs.dtype)

    def bw(gout):
        return (gout * grad_nchw,)

    return T.make_op(value, (probs,), bw)


def lovasz_softmax(logits: Tensor, target) -> Tensor:
    target = _check_target(logits, target)
    return lovasz_from_probs(T.softmax(logits, axis=1), target)


def composite_loss(logits: Tensor, target, cfg: LossConfig | None = None, alpha=None,
                   weights: tuple | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    wf, wd, wl = weights if weights is not None else (cfg.w_focal, cfg.w_dice, cfg.w_lovasz)
    target = _check_target(logits, target)
    terms = []
    if wf:
        terms.append(focal_loss(logits, target, cfg.focal_gamma, alpha) * wf)
    if wd:
        terms.append(dice_loss(logits, target, cfg.dice_eps) * wd)
    if wl:
        terms.append(lovasz_softmax(logits, target) * wl)
    if not terms:
        return Tensor(np.zeros((), dtype=logits.dtype))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total
