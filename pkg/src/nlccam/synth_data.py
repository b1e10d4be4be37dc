"""Synthetic localization dataset with known boxes.

Each image is smooth value noise (same distribution for every class) with
one opaque rectangular blob pasted at a random position. The blob is filled
with a grating whose orientation and period identify the class, so a small
model can learn the classes while the background carries no class signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import storage
from .localization import Box
from .tensor_core import bilinear_resize

ORIENTATIONS = 4


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 8
    train_per_class: int = 250
    test_per_class: int = 50
    image_size: int = 32
    blob_min: int = 12
    blob_max: int = 20
    background_scale: int = 6
    background_amplitude: float = 0.6
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise ValueError("per-class counts must be non-negative")
        if self.image_size < 4:
            raise ValueError(f"image size {self.image_size} is too small")
        if not 1 <= self.blob_min <= self.blob_max <= self.image_size:
            raise ValueError(
                f"blob size range [{self.blob_min}, {self.blob_max}] must fit in {self.image_size}"
            )
        if self.background_scale < 1 or self.in_channels < 1:
            raise ValueError("background scale and channel count must be positive")


@dataclass
class Dataset:
    ids: list[str]
    images: np.ndarray  # B x C x H x W, float32-representable values
    labels: np.ndarray
    boxes: list[tuple[Box, ...]]

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, image_id: str) -> int:
        return self.ids.index(image_id)


def class_grating(cls: int) -> tuple[float, float]:
    """(orientation in radians, period in pixels) of a class pattern."""
    theta = math.pi * (cls % ORIENTATIONS) / ORIENTATIONS
    return theta, 4.0 * (1 + cls // ORIENTATIONS)


def _background(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    cells = cfg.image_size // cfg.background_scale + 2
    out = np.empty((cfg.in_channels, cfg.image_size, cfg.image_size))
    for c in range(cfg.in_channels):
        coarse = rng.uniform(-1.0, 1.0, (cells, cells))
        out[c] = bilinear_resize(coarse, cfg.image_size, cfg.image_size)
    return cfg.background_amplitude * out


def _image(rng: np.random.Generator, cls: int, cfg: SynthConfig) -> tuple[np.ndarray, Box]:
    img = _background(rng, cfg)
    bw, bh = (int(v) for v in rng.integers(cfg.blob_min, cfg.blob_max + 1, 2))
    x0 = int(rng.integers(0, cfg.image_size - bw + 1))
    y0 = int(rng.integers(0, cfg.image_size - bh + 1))
    theta, period = class_grating(cls)
    phase = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:bh, 0:bw]
    wave = np.sin(2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / period + phase)
    img[:, y0 : y0 + bh, x0 : x0 + bw] = wave
    return img, Box(x0, y0, x0 + bw, y0 + bh)


def _split(cfg: SynthConfig, name: str, per_class: int, stream: int) -> Dataset:
    rng = np.random.default_rng([cfg.seed, stream])
    labels = rng.permutation(np.repeat(np.arange(cfg.num_classes), per_class))
    images = np.empty((len(labels), cfg.in_channels, cfg.image_size, cfg.image_size))
    boxes = []
    for i, cls in enumerate(labels):
        images[i], box = _image(rng, int(cls), cfg)
        boxes.append((box,))
    # round through float32 so in-memory data equals what the files hold
    images = images.astype(np.float32).astype(np.float64)
    ids = [f"{name}-{i:05d}" for i in range(len(labels))]
    return Dataset(ids, images, labels.astype(np.int64), boxes)


def generate(cfg: SynthConfig) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) splits; independent RNG streams and id prefixes."""
    return _split(cfg, "train", cfg.train_per_class, 0), _split(cfg, "test", cfg.test_per_class, 1)


def write_dataset(out_dir, train: Dataset, test: Dataset) -> None:
    out = Path(out_dir)
    for name, ds in (("train", train), ("test", test)):
        entries = []
        for image_id, img, label, boxes in zip(ds.ids, ds.images, ds.labels, ds.boxes):
            rel = f"images/{image_id}.tensor"
            storage.save_tensor(out / rel, img)
            entries.append(storage.ManifestEntry(image_id, rel, int(label), boxes))
        storage.write_manifest(out / f"{name}.tsv", entries)


def load_split(manifest_path) -> Dataset:
    """Load a manifest; tensor paths resolve relative to the manifest's directory."""
    manifest_path = Path(manifest_path)
    entries = storage.read_manifest(manifest_path)
    if not entries:
        raise ValueError(f"manifest {manifest_path} is empty")
    images = np.stack(
        [storage.load_tensor(manifest_path.parent / e.tensor_path) for e in entries]
    )
    return Dataset(
        [e.image_id for e in entries],
        images,
        np.array([e.label for e in entries], dtype=np.int64),
        [e.boxes for e in entries],
    )


def background_suppression_score(m, gt: Box) -> float:
    """Mean map value outside the ground-truth box (lower is better)."""
    m = np.asarray(m, dtype=np.float64)
    outside = np.ones(m.shape, dtype=bool)
    outside[gt.y0 : gt.y1, gt.x0 : gt.x1] = False
    if not outside.any():
        return 0.0
    return float(m[outside].mean())
