"""Datasets: manifest loading, synthetic imbalanced generation, flip augmentation."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .serialize import load_tensor, save_tensor

BACKGROUND = 0.5
# chosen so nearest-template accuracy at noise 0.3, 16x16 is ~96%, not trivially 100%
TEMPLATE_CONTRAST = 0.06


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, ch, H, W) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, ch, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetError("one label per image required")
        if len(self.labels) == 0:
            raise DatasetError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


def load_dataset(manifest_path, num_classes: int | None = None) -> Dataset:
    """Read a ``path,label`` CSV manifest of CUTN images (u8 scaled to [0, 1])."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label"]:
            raise DatasetError(f"{manifest_path}: header must be 'path,label'")
        rows = [r for r in reader if r]
    if not rows:
        raise DatasetError(f"{manifest_path}: manifest lists no samples")
    images, labels = [], []
    for path, label in rows:
        p = Path(path)
        if not p.is_absolute():
            p = root / p
        if not p.exists():
            raise DatasetError(f"missing image file {p}")
        arr = load_tensor(p)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / np.float32(255)
        elif arr.dtype == np.float32:
            pass
        else:
            raise DatasetError(f"{p}: images must be u8 or f32, got {arr.dtype}")
        if arr.ndim != 3:
            raise DatasetError(f"{p}: image must be (ch, H, W), got {arr.shape}")
        if images and arr.shape != images[0].shape:
            raise DatasetError(f"{p}: shape {arr.shape} differs from {images[0].shape}")
        images.append(arr)
        labels.append(int(label))
    labels = np.asarray(labels, dtype=np.int64)
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.max() >= c:
        raise DatasetError(f"label {labels.max()} exceeds declared class count {c}")
    return Dataset(np.stack(images), labels, c)


def save_dataset(dataset: Dataset, out_dir, prefix: str = "img") -> Path:
    """Write images as f32 CUTN files plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    width = len(str(len(dataset) - 1))
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        fh.write("path,label\n")
        for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
            rel = f"images/{prefix}{i:0{width}d}.cutn"
            save_tensor(out_dir / rel, img.astype(np.float32))
            fh.write(f"{rel},{int(label)}\n")
    return manifest


@dataclass(frozen=True)
class SynthSpec:
    class_counts: tuple[int, ...]
    image_size: int = 16
    noise_std: float = 0.3
    seed: int = 0
    channels: int = 1
    contrast: float = TEMPLATE_CONTRAST

    def __post_init__(self):
        object.__setattr__(self, "class_counts", tuple(int(c) for c in self.class_counts))
        if len(self.class_counts) < 2 or min(self.class_counts) < 1:
            raise ValueError("need at least two classes with positive counts")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def _walsh(levels: int, size: int) -> np.ndarray:
    """Product of Rademacher square waves selected by the bits of ``levels``."""
    idx = np.arange(size)
    out = np.ones(size)
    bit = 0
    while levels >> bit:
        if (levels >> bit) & 1:
            out = out * np.where((idx >> bit) & 1, -1.0, 1.0)
        bit += 1
    return out


def _pattern_codes(num_classes: int) -> list[tuple[int, int]]:
    """(row, col) Walsh indices, coarsest first, constant pattern excluded.

    Column indices use an even number of square waves so every template is
    invariant under horizontal flips.
    """
    codes: list[tuple[int, int]] = []
    limit = 1
    while len(codes) < num_classes:
        limit *= 2
        codes = sorted(
            ((r, c) for r in range(limit) for c in range(limit)
             if (r, c) != (0, 0) and bin(c).count("1") % 2 == 0),
            key=lambda rc: (max(rc).bit_length(), rc),
        )
    return codes[:num_classes]


def class_templates(num_classes: int, size: int, contrast: float = TEMPLATE_CONTRAST) -> np.ndarray:
    """One +-1 Walsh texture per class, scaled around a mid-grey background.

    The patterns are mutually orthogonal (stripes of several orientations and
    frequencies, checkerboards), so every pair of templates is equidistant.
    """
    codes = _pattern_codes(num_classes)
    period = 2 ** max(max(rc).bit_length() for rc in codes)
    if size % period:
        raise ValueError(f"image size must be a multiple of {period} for {num_classes} classes")
    out = np.empty((num_classes, size, size))
    for c, (r, col) in enumerate(codes):
        out[c] = BACKGROUND + contrast * np.outer(_walsh(r, size), _walsh(col, size))
    return out


def synth_generate(spec: SynthSpec) -> Dataset:
    """Template plus Gaussian noise, clipped to [0, 1]; labels are grouped by class."""
    rng = np.random.default_rng(spec.seed)
    c = len(spec.class_counts)
    templates = class_templates(c, spec.image_size, spec.contrast)
    labels = np.repeat(np.arange(c), spec.class_counts)
    n = labels.size
    noise = rng.normal(0.0, spec.noise_std, size=(n, spec.channels, spec.image_size, spec.image_size))
    images = np.clip(templates[labels][:, None] + noise, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, c)


def nearest_template_predict(images: np.ndarray, templates: np.ndarray) -> np.ndarray:
    """Assign each image to the template with the smallest squared distance."""
    flat = images.reshape(len(images), -1).astype(np.float64)
    tmpl = np.repeat(templates[:, None], images.shape[1], axis=1).reshape(len(templates), -1)
    d = ((flat[:, None, :] - tmpl[None]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def augment(image: np.ndarray, rng: np.random.Generator, flip_prob: float = 0.5) -> np.ndarray:
    """Horizontal flip with probability ``flip_prob``; one rng draw per call."""
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError("flip_prob must lie in [0, 1]")
    if rng.random() < flip_prob:
        return hflip(image)
    return image


def augment_batch(images: np.ndarray, rng: np.random.Generator, flip_prob: float = 0.5) -> np.ndarray:
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError("flip_prob must lie in [0, 1]")
    flips = rng.random(len(images)) < flip_prob
    out = images.copy()
    out[flips] = out[flips][..., ::-1]
    return out


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]

