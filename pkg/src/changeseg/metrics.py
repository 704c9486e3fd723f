"""Confusion-matrix accumulation and the scores derived from it."""

from __future__ import annotations

import numpy as np

from . import _kernels


class MetricsError(ValueError):
    pass


class ConfusionMatrix:
    """counts[i, j] = pixels predicted as class i whose ground truth is class j."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise MetricsError("need at least two classes (no-change plus one change class)")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise MetricsError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
        k = self.num_classes
        for name, arr in (("prediction", pred), ("ground truth", gt)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise MetricsError(f"{name} contains class {arr.max() if arr.max() >= k else arr.min()} outside [0, {k - 1}]")
        self.counts += _kernels.confusion(np.ascontiguousarray(pred, dtype=np.int64),
                                          np.ascontiguousarray(gt, dtype=np.int64), k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise MetricsError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    def __add__(self, other):
        return self.merge(other)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def compute_metrics(cm: ConfusionMatrix, include_background: bool = False) -> dict:
    """OA, per-class P/R/F1/IoU and macro means over the included classes.

    Classes with TP + FP + FN = 0 are left out of the macro means; a zero
    denominator makes the per-class ratio 0.
    """
    q = cm.counts.astype(np.float64)
    total = q.sum()
    if total == 0:
        raise MetricsError("confusion matrix is empty")
    tp = np.diag(q)
    fp = q.sum(axis=1) - tp
    fn = q.sum(axis=0) - tp
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2.0 * precision * recall, precision + recall)
    iou = _safe_div(tp, tp + fp + fn)
    classes = np.arange(cm.num_classes)
    active = (tp + fp + fn) > 0
    if not include_background:
        active &= classes != 0
    sel = classes[active]

    def macro(v):
        return float(v[sel].mean()) if sel.size else 0.0

    return {
        "OA": float(tp.sum() / total),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "iou": iou,
        "mIoU": macro(iou),
        "mP": macro(precision),
        "mR": macro(recall),
        "mF1": macro(f1),
        "classes": sel,
        "include_background": include_background,
    }


def changed_miou(cm: ConfusionMatrix) -> float:
    return compute_metrics(cm, include_background=False)["mIoU"]


def format_report(cm: ConfusionMatrix, class_names=None) -> str:
    """Per-class table plus a key=value block for both macro variants."""
    k = cm.num_classes
    names = list(class_names) if class_names else [f"class_{i}" for i in range(k)]
    changed = compute_metrics(cm, include_background=False)
    full = compute_metrics(cm, include_background=True)
    lines = [f"{'class':<20} {'P':>8} {'R':>8} {'F1':>8} {'IoU':>8}"]
    for i in range(k):
        lines.append(f"{names[i]:<20} {full['precision'][i]:8.4f} {full['recall'][i]:8.4f} "
                     f"{full['f1'][i]:8.4f} {full['iou'][i]:8.4f}")
    lines.append("")
    lines.append(f"OA={changed['OA']:.6f}")
    for tag, m in (("changed", changed), ("all", full)):
        for key in ("mP", "mR", "mF1", "mIoU"):
            lines.append(f"{key}_{tag}={m[key]:.6f}")
    for i in range(k):
        lines.append(f"iou_{i}={full['iou'][i]:.6f}")
    lines.append(f"pixels={cm.total}")
    return "\n".join(lines)


def parse_report(text: str) -> dict:
    """Read back the key=value lines of ``format_report``."""
    out = {}
    for line in text.splitlines():
        if "=" in line and " " not in line.strip():
            key, value = line.split("=", 1)
            out[key] = float(value)
    return out
