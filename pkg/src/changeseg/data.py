"""Bi-temporal dataset I/O, label conversion, augmentation and synthetic scenes.

Layout on disk::

    root/manifest.txt
    root/<split>/<id>/t1.png   8-bit RGB
    root/<split>/<id>/t2.png   8-bit RGB
    root/<split>/<id>/label.png  8-bit grayscale class indices
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .tensor import Rng

# index 0 is no-change; 1..6 are the default change-category colours
DEFAULT_PALETTE = [
    (0, 0, 0),
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 255, 0),
    (128, 0, 128),
    (0, 255, 255),
]
DEFAULT_CLASSES = ["no_change", "building_damage", "new_building", "new_camp", "farmland_damage",
                "greenhouse_damage", "new_greenhouse"]
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    def __init__(self, message: str, sample_id: str | None = None):
        self.sample_id = sample_id
        super().__init__(f"sample {sample_id}: {message}" if sample_id else message)


@dataclass
class BiTemporalSample:
    t1: np.ndarray
    t2: np.ndarray
    label: np.ndarray
    sample_id: str = ""

    def validate(self, k: int | None = None) -> "BiTemporalSample":
        for name, img in (("t1", self.t1), ("t2", self.t2)):
            if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
                raise DatasetError(f"{name} must be an 8-bit RGB image, got {img.dtype} {img.shape}", self.sample_id)
        if self.label.dtype != np.uint8 or self.label.ndim != 2:
            raise DatasetError(f"label must be 8-bit single-channel, got {self.label.dtype} {self.label.shape}",
                               self.sample_id)
        if not (self.t1.shape[:2] == self.t2.shape[:2] == self.label.shape):
            raise DatasetError(f"size mismatch t1={self.t1.shape[:2]} t2={self.t2.shape[:2]} "
                               f"label={self.label.shape}", self.sample_id)
        if k is not None and self.label.size and int(self.label.max()) > k:
            ys, xs = np.nonzero(self.label > k)
            raise DatasetError(f"label value {int(self.label.max())} exceeds K={k} "
                               f"(first at row {ys[0]}, col {xs[0]})", self.sample_id)
        return self


def default_palette(k: int) -> list:
    pal = list(DEFAULT_PALETTE[: k + 1])
    rng = Rng(12345)
    while len(pal) < k + 1:
        c = [int(v) for v in rng.integers(0, 256, size=3)]
        c[len(pal) % 3] = 0  # keep one channel at 0 so the colour stays saturated
        pal.append(tuple(c))
    return pal


@dataclass
class DatasetManifest:
    k: int
    class_names: list = field(default_factory=list)
    palette: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.class_names:
            self.class_names = DEFAULT_CLASSES[: self.k + 1] if self.k <= 6 else \
                ["no_change"] + [f"change_{i}" for i in range(1, self.k + 1)]
        if not self.palette:
            self.palette = default_palette(self.k)
        if len(self.palette) < self.k + 1:
            raise DatasetError(f"palette covers {len(self.palette)} classes, need {self.k + 1}")
        if tuple(self.palette[0]) != (0, 0, 0):
            raise DatasetError("palette index 0 (no change) must be black")

    def to_text(self) -> str:
        lines = [f"k={self.k}"]
        for i in range(self.k + 1):
            lines.append(f"class_name_{i}={self.class_names[i]}")
        for i in range(self.k + 1):
            lines.append(f"palette_{i}={','.join(str(v) for v in self.palette[i])}")
        for split in sorted(self.splits):
            lines.append(f"split_{split}={','.join(self.splits[split])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetError(f"manifest line without '=': {line!r}")
            key, value = line.split("=", 1)
            kv[key.strip()] = value.strip()
        if "k" not in kv:
            raise DatasetError("manifest lacks the 'k' key")
        k = int(kv["k"])
        names = [kv.get(f"class_name_{i}", "") for i in range(k + 1)]
        palette = []
        for i in range(k + 1):
            if f"palette_{i}" in kv:
                palette.append(tuple(int(v) for v in kv[f"palette_{i}"].split(",")))
        splits = {key[len("split_"):]: [s for s in value.split(",") if s] for key, value in kv.items()
                  if key.startswith("split_")}
        return cls(k=k, class_names=names if all(names) else [], palette=palette if len(palette) == k + 1 else [],
                   splits=splits)

    def save(self, root) -> None:
        Path(root, "manifest.txt").write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        path = Path(root, "manifest.txt")
        if not path.is_file():
            raise DatasetError(f"missing manifest {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))


def _read_png(path: Path, mode: str, sample_id: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file {path}", sample_id)
    with Image.open(path) as im:
        if mode == "L" and im.mode not in ("L", "P"):
            raise DatasetError(f"{path.name} must be single-channel, got mode {im.mode}", sample_id)
        if mode == "L" and im.mode == "P":
            # palette-indexed labels keep their raw indices
            return np.array(im, dtype=np.uint8)
        return np.array(im.convert(mode), dtype=np.uint8)


def read_sample(sample_dir, k: int | None = None) -> BiTemporalSample:
    d = Path(sample_dir)
    sid = d.name
    s = BiTemporalSample(_read_png(d / "t1.png", "RGB", sid), _read_png(d / "t2.png", "RGB", sid),
                         _read_png(d / "label.png", "L", sid), sid)
    return s.validate(k)


def write_sample(sample: BiTemporalSample, sample_dir) -> None:
    d = Path(sample_dir)
    d.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sample.t1, "RGB").save(d / "t1.png")
    Image.fromarray(sample.t2, "RGB").save(d / "t2.png")
    Image.fromarray(sample.label, "L").save(d / "label.png")


def list_ids(root, split: str) -> list:
    split_dir = Path(root, split)
    if not split_dir.is_dir():
        raise DatasetError(f"split directory {split_dir} does not exist")
    return sorted(p.name for p in split_dir.iterdir() if p.is_dir())


def load_dataset(root, split: str, k: int | None = None) -> Iterator[BiTemporalSample]:
    """Yield validated samples of ``split`` in lexicographic id order.

    ``k`` defaults to the manifest's value when a manifest is present.
    """
    if k is None and Path(root, "manifest.txt").is_file():
        k = DatasetManifest.load(root).k
    for sid in list_ids(root, split):
        yield read_sample(Path(root, split, sid), k)


def scd_to_mcd(label_t1: np.ndarray, label_t2: np.ndarray) -> np.ndarray:
    """Keep the post-change class where the semantic labels differ and t2 is labelled."""
    a = np.asarray(label_t1)
    b = np.asarray(label_t2)
    if a.shape != b.shape:
        raise DatasetError(f"semantic label shapes differ: {a.shape} vs {b.shape}")
    return np.where((a != b) & (b > 0), b, 0).astype(np.uint8)


@dataclass
class AugmentationConfig:
    hflip: bool = field(default=True, metadata={"help": "random horizontal flip"})
    vflip: bool = field(default=True, metadata={"help": "random vertical flip"})
    rot90: bool = field(default=True, metadata={"help": "random rotation by a multiple of 90 degrees"})


def augment(sample: BiTemporalSample, cfg: AugmentationConfig, rng: Rng) -> BiTemporalSample:
    """Apply one random flip/rotation draw identically to both images and the label."""
    # always draw all three so the stream position does not depend on cfg
    hflip = rng.random(()) < 0.5
    vflip = rng.random(()) < 0.5
    quarter = int(rng.integers(0, 4))
    arrays = [sample.t1, sample.t2, sample.label]
    if cfg.hflip and hflip:
        arrays = [a[:, ::-1] for a in arrays]
    if cfg.vflip and vflip:
        arrays = [a[::-1] for a in arrays]
    if cfg.rot90 and quarter:
        arrays = [np.rot90(a, quarter, axes=(0, 1)) for a in arrays]
    t1, t2, label = (np.ascontiguousarray(a) for a in arrays)
    return BiTemporalSample(t1, t2, label, sample.sample_id)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def _texture(size: int, rng: Rng) -> np.ndarray:
    """Smooth random background with every channel inside [40, 200]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3))
    for ch in range(3):
        acc = np.zeros((size, size))
        for _ in range(4):
            fx, fy = rng.uniform(0.5, 4.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            acc += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        acc += 0.6 * rng.normal((size, size))
        acc = (acc - acc.min()) / max(acc.max() - acc.min(), 1e-9)
        img[..., ch] = 40 + 160 * acc
    return np.round(img).astype(np.uint8)


def _shape_mask(size: int, rng: Rng, min_side: int, max_side: int) -> np.ndarray:
    hgt, wid = (int(v) for v in rng.integers(min_side, max_side + 1, size=2))
    top = int(rng.integers(0, size - hgt + 1))
    left = int(rng.integers(0, size - wid + 1))
    mask = np.zeros((size, size), dtype=bool)
    if rng.random(()) < 0.5:
        mask[top:top + hgt, left:left + wid] = True
    else:
        yy, xx = np.mgrid[0:size, 0:size]
        cy, cx = top + (hgt - 1) / 2.0, left + (wid - 1) / 2.0
        mask = ((yy - cy) / (hgt / 2.0)) ** 2 + ((xx - cx) / (wid / 2.0)) ** 2 <= 1.0
    return mask


def synth_sample(size: int, k: int, rng: Rng, sample_id: str, palette=None) -> BiTemporalSample:
    """One scene: shared texture, 1..4 non-overlapping shapes added to or removed from t2."""
    palette = palette or default_palette(k)
    base = _texture(size, rng)
    t1, t2 = base.copy(), base.copy()
    label = np.zeros((size, size), dtype=np.uint8)
    occupied = np.zeros((size, size), dtype=bool)
    n_shapes = int(rng.integers(1, 5))
    lo, hi = max(size // 5, 4), max(2 * size // 5, 6)
    for _ in range(n_shapes):
        for _attempt in range(50):
            mask = _shape_mask(size, rng, lo, hi)
            grown = mask.copy()
            grown[1:] |= mask[:-1]
            grown[:-1] |= mask[1:]
            grown[:, 1:] |= grown[:, :-1]
            grown[:, :-1] |= grown[:, 1:]
            if not (grown & occupied).any():
                break
        else:
            continue
        cls = int(rng.integers(1, k + 1))
        color = np.array(palette[cls], dtype=np.uint8)
        if rng.random(()) < 0.5:
            t2[mask] = color  # added
        else:
            t1[mask] = color  # removed
        label[mask] = cls
        occupied |= mask
    return BiTemporalSample(t1, t2, label, sample_id)


def synth_generate(root, count: int, size: int, k: int, seed: int, val_count: int = 0) -> DatasetManifest:
    """Write ``count`` training (and ``val_count`` validation) scenes under ``root``."""
    if size <= 0 or size % 32:
        raise DatasetError(f"synthetic image size must be a positive multiple of 32, got {size}")
    if k < 1 or k > 255:
        raise DatasetError(f"K must be in [1, 255], got {k}")
    if count < 0 or val_count < 0:
        raise DatasetError("sample counts must be non-negative")
    root = Path(root)
    rng = Rng(seed)
    manifest = DatasetManifest(k=k)
    for split, n in (("train", count), ("val", val_count)):
        (root / split).mkdir(parents=True, exist_ok=True)
        ids = []
        for i in range(n):
            sid = f"{split}_{i:04d}"
            sample = synth_sample(size, k, rng, sid, manifest.palette)
            write_sample(sample, root / split / sid)
            ids.append(sid)
        manifest.splits[split] = ids
    manifest.save(root)
    return manifest


def stack_batch(samples: list) -> tuple:
    t1 = np.stack([s.t1 for s in samples])
    t2 = np.stack([s.t2 for s in samples])
    label = np.stack([s.label for s in samples]).astype(np.int64)
    return t1, t2, label


def class_frequencies(samples, num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.label.ravel(), minlength=num_classes)[:num_classes]
    return counts / max(counts.sum(), 1)


def colorize(label: np.ndarray, palette) -> np.ndarray:
    pal = np.asarray(palette, dtype=np.uint8)
    return pal[label]


def compare_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Binary change agreement: TP white, TN black, FP red, FN green."""
    p = pred > 0
    g = gt > 0
    out = np.zeros(pred.shape + (3,), dtype=np.uint8)
    out[p & g] = (255, 255, 255)
    out[p & ~g] = (255, 0, 0)
    out[~p & g] = (0, 255, 0)
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
