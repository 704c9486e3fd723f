"""Warm-restart cosine schedule, AdamW with group LR scaling, train/eval loops."""

from __future__ import annotations

import copy
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import Config, TrainConfig
from .data import AugmentationConfig, BiTemporalSample, augment, class_frequencies, stack_batch
from .losses import composite_loss
from .metrics import ConfusionMatrix, changed_miou
from .model import ChangeNet, normalize_images
from .tensor import Rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Cosine annealing with warm restarts; cycle i lasts t0 * t_mult**i epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    start, length = 0.0, float(cfg.t0)
    while epoch >= start + length:
        start += length
        length *= cfg.t_mult
    t = epoch - start
    return cfg.eta_min + 0.5 * (cfg.base_lr - cfg.eta_min) * (1.0 + math.cos(math.pi * t / length))


def cycle_starts(cfg: TrainConfig, until: float) -> list:
    out, start, length = [], 0.0, float(cfg.t0)
    while start <= until:
        out.append(start)
        start += length
        length *= cfg.t_mult
    return out


class AdamW:
    """Decoupled weight decay Adam; parameters of the frozen group are never touched."""

    def __init__(self, named_params, cfg: TrainConfig):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.cfg = cfg
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, group_lr: dict):
        cfg = self.cfg
        for n, p in self.params:
            if p.grad is None:
                raise TrainingError(f"parameter {n} has no gradient")
        self.step_count += 1
        b1, b2 = cfg.beta1, cfg.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for n, p in self.params:
            lr = group_lr[p.group]
            g = p.grad.astype(p.dtype, copy=False)
            m = self.m[n]
            v = self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr == 0.0:
                continue
            p.data *= (1.0 - lr * cfg.weight_decay)
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)).astype(p.dtype, copy=False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        out["step"] = np.array(float(self.step_count))
        for n, _ in self.params:
            out["m." + n] = self.m[n].copy()
            out["v." + n] = self.v[n].copy()
        return out

    def load_state_dict(self, state) -> None:
        self.step_count = int(state["step"])
        for n, _ in self.params:
            self.m[n] = np.array(state["m." + n], copy=True)
            self.v[n] = np.array(state["v." + n], copy=True)


def build_model(cfg: Config, num_classes: int | None = None) -> ChangeNet:
    dec = copy.deepcopy(cfg.decoder)
    if num_classes is not None:
        dec.num_classes = num_classes
    return ChangeNet(cfg.backbone, cfg.mscad, dec, cfg.train.ablation())


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_state: "OrderedDict | None" = None
    best_epoch: int = -1
    best_miou: float = -1.0
    steps: int = 0
    optimizer: AdamW | None = None


def evaluate(model: ChangeNet, samples, batch: int = 4, num_classes: int | None = None) -> ConfusionMatrix:
    """Argmax predictions over ``samples`` accumulated into a confusion matrix."""
    samples = list(samples)
    if not samples:
        raise ValueError("empty dataset")
    if num_classes is not None and num_classes != model.num_classes:
        raise ValueError(f"class-count mismatch: model predicts {model.num_classes} classes, "
                         f"dataset has {num_classes}")
    cm = ConfusionMatrix(model.num_classes)
    dtype = model.backbone.stem.weight.dtype
    for i in range(0, len(samples), batch):
        t1, t2, label = stack_batch(samples[i:i + batch])
        pred = model.predict(normalize_images(t1, dtype), normalize_images(t2, dtype))
        cm.update(pred, label)
    return cm


def train(model: ChangeNet, train_samples, cfg: Config, val_samples=None, on_epoch=None) -> TrainResult:
    """Run ``cfg.train.epochs`` epochs (or ``max_steps`` optimizer steps).

    Validation runs after every epoch on ``val_samples``, falling back to the
    un-augmented training samples. The best epoch by changed-class mIoU is kept.
    """
    tc: TrainConfig = cfg.train
    aug: AugmentationConfig = cfg.aug
    train_samples = list(train_samples)
    val_samples = list(val_samples) if val_samples else train_samples
    result = TrainResult()
    opt = AdamW(model.named_parameters(), tc)
    result.optimizer = opt
    if tc.epochs == 0 or not train_samples:
        return result
    alpha = cfg.loss.alpha_vector(model.num_classes,
                                  class_frequencies(train_samples, model.num_classes)
                                  if cfg.loss.focal_alpha.strip().lower() == "inverse_freq" else None)
    mults = tc.lr_multipliers()
    dtype = model.backbone.stem.weight.dtype
    root = Rng(tc.seed)
    steps = 0
    n = len(train_samples)
    for epoch in range(tc.epochs):
        erng = root.child(epoch)
        order = erng.permutation(n)
        aug_rng = erng.child(1)
        drop_rng = erng.child(2)
        lr = lr_at(float(epoch), tc)
        group_lr = {g: lr * m for g, m in mults.items()}
        model.train()
        losses = []
        for b, start in enumerate(range(0, n, tc.batch)):
            batch = [augment(train_samples[j], aug, aug_rng) for j in order[start:start + tc.batch]]
            t1, t2, label = stack_batch(batch)
            logits = model(normalize_images(t1, dtype), normalize_images(t2, dtype), drop_rng)
            loss = composite_loss(logits, label, cfg.loss, alpha)
            value = float(loss.data)
            if not math.isfinite(value):
                ids = ",".join(s.sample_id for s in batch)
                raise TrainingError(f"non-finite loss {value} at epoch {epoch} batch {b} (samples {ids})")
            opt.zero_grad()
            T.backward(loss)
            opt.step(group_lr)
            losses.append(value)
            steps += 1
            if tc.max_steps and steps >= tc.max_steps:
                break
        cm = evaluate(model, val_samples, tc.batch)
        miou = changed_miou(cm)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mIoU": miou, "lr": lr}
        result.history.append(row)
        log.info("epoch %d loss %.5f val_mIoU %.4f lr %.3g", epoch, row["train_loss"], miou, lr)
        if miou > result.best_miou:
            result.best_miou, result.best_epoch = miou, epoch
            result.best_state = model.state_dict()
        if on_epoch is not None:
            on_epoch(row)
        if tc.max_steps and steps >= tc.max_steps:
            break
    result.steps = steps
    return result


def history_csv(history: list) -> str:
    lines = ["epoch,train_loss,val_mIoU,lr"]
    for row in history:
        lines.append(f"{row['epoch']},{row['train_loss']!r},{row['val_mIoU']!r},{row['lr']!r}")
    return "\n".join(lines) + "\n"


def write_history(path, history: list) -> None:
    Path(path).write_text(history_csv(history), encoding="utf-8")
