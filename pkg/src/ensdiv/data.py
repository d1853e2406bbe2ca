"""Synthetic shapes dataset, IDX ingestion and dataset serialisation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .exceptions import ConfigError, FormatError

IDX_UBYTE = 0x08

SHAPES = ("square", "cross", "triangle", "ring", "circle", "diamond")
COLORS = (
    (0.90, 0.15, 0.15),
    (0.15, 0.35, 0.95),
    (0.15, 0.80, 0.25),
    (0.95, 0.85, 0.10),
    (0.85, 0.20, 0.85),
    (0.10, 0.85, 0.85),
)
MIN_IMAGE_SIZE = 12


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) in [0, 1]
    labels: np.ndarray  # (n,) int64
    n_classes: int
    split: str = "train"
    seed: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise FormatError(
                f"images {self.images.shape} and labels {self.labels.shape} are inconsistent"
            )

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx, split=None):
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, split or self.split, self.seed)


def class_glyph(label, n_classes):
    """(shape, colour) of a class; classes are spread evenly over both."""
    n_colors = -(-n_classes // len(SHAPES))
    n_shapes = -(-n_classes // n_colors)
    return SHAPES[label % n_shapes], COLORS[label // n_shapes]


def _glyph_mask(shape, size, cy, cx, radius):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy**2 + dx**2 <= radius**2
    if shape == "square":
        return (np.abs(dy) <= radius * 0.8) & (np.abs(dx) <= radius * 0.8)
    if shape == "triangle":
        top = cy - radius
        t = (yy - top) / (2 * radius)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * radius)
    if shape == "cross":
        w = max(radius * 0.3, 1.0)
        return ((np.abs(dy) <= w) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= w) & (np.abs(dy) <= radius))
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= radius
    if shape == "ring":
        r2 = dy**2 + dx**2
        return (r2 <= radius**2) & (r2 >= (radius * 0.55) ** 2)
    raise ConfigError(f"unknown glyph {shape!r}")


def render(label, n_classes, size, rng, channels=3):
    """One image of class ``label``: a coloured glyph on a textured background."""
    shape, color = class_glyph(label, n_classes)
    base = rng.uniform(0.25, 0.55)
    coarse = rng.normal(0.0, 0.06, size=(channels, 4, 4))
    texture = np.kron(coarse, np.ones((size // 4 + 1, size // 4 + 1)))[:, :size, :size]
    img = base + texture + rng.normal(0.0, 0.03, size=(channels, size, size))
    radius = rng.uniform(0.22, 0.32) * size
    margin = radius + 1
    jitter = size * 0.12
    cy = np.clip(size / 2 + rng.uniform(-jitter, jitter), margin, size - margin)
    cx = np.clip(size / 2 + rng.uniform(-jitter, jitter), margin, size - margin)
    mask = _glyph_mask(shape, size, cy, cx, radius)
    col = np.asarray(color[:channels] if channels <= 3 else color + (0.5,) * (channels - 3))
    if channels == 1:
        col = np.asarray([np.mean(color)])
    shade = rng.uniform(0.85, 1.0)
    img = np.where(mask[None], col[:, None, None] * shade, img)
    return np.clip(img, 0.0, 1.0)


def gen_shapes(n, n_classes=8, image_size=32, seed=0, channels=3, split="train"):
    """Balanced, seed-deterministic synthetic glyph dataset.

    Labels cycle through the classes and are then shuffled; image ``i`` is
    rendered from a generator keyed on ``(seed, i)``.
    """
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    if n_classes > len(SHAPES) * len(COLORS):
        raise ConfigError(f"at most {len(SHAPES) * len(COLORS)} classes are available")
    if image_size < MIN_IMAGE_SIZE:
        raise ConfigError(f"image size {image_size} is too small for glyphs (min {MIN_IMAGE_SIZE})")
    labels = np.arange(n) % n_classes
    np.random.default_rng([seed, 2**31]).shuffle(labels)
    images = np.empty((n, channels, image_size, image_size))
    for i, y in enumerate(labels):
        images[i] = render(int(y), n_classes, image_size, np.random.default_rng([seed, i]), channels)
    return Dataset(images, labels, n_classes, split, seed)


def train_val_split(ds, val_fraction=0.2, seed=0):
    idx = np.random.default_rng([seed, 7]).permutation(len(ds))
    n_val = int(round(len(ds) * val_fraction))
    return ds.subset(np.sort(idx[n_val:]), "train"), ds.subset(np.sort(idx[:n_val]), "val")


# -- IDX --------------------------------------------------------------------


def _read_idx(path, expected_ndims):
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise FormatError(f"{path}: truncated header")
    zero, dtype, ndim = struct.unpack(">HBB", blob[:4])
    if zero != 0 or dtype != IDX_UBYTE or ndim not in expected_ndims:
        raise FormatError(f"{path}: bad magic 0x{int.from_bytes(blob[:4], 'big'):08x}")
    hdr = 4 + 4 * ndim
    if len(blob) < hdr:
        raise FormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", blob[4:hdr])
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) - hdr < count:
        raise FormatError(f"{path}: truncated payload ({len(blob) - hdr} of {count} bytes)")
    if len(blob) - hdr > count:
        raise FormatError(f"{path}: {len(blob) - hdr - count} unexpected trailing bytes")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=hdr).reshape(dims)


def load_idx(images_path, labels_path, n_classes=None):
    """Read an IDX image file (3-D ``n,H,W`` or 4-D ``n,C,H,W``) and its labels."""
    raw = _read_idx(images_path, (3, 4))
    labels = _read_idx(labels_path, (1,)).astype(np.int64)
    if raw.shape[0] != labels.shape[0]:
        raise FormatError(f"image count {raw.shape[0]} does not match label count {labels.shape[0]}")
    if raw.ndim == 3:
        raw = raw[:, None]
    n_classes = n_classes or (int(labels.max()) + 1 if len(labels) else 2)
    return Dataset(raw.astype(np.float64) / 255.0, labels, max(n_classes, 2), "idx")


def _write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, IDX_UBYTE, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def write_idx(ds, images_path, labels_path):
    pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    if pixels.shape[1] == 1:
        pixels = pixels[:, 0]
    _write_idx(images_path, pixels)
    _write_idx(labels_path, ds.labels.astype(np.uint8))


# -- named-tensor dumps -----------------------------------------------------


def save_dataset(ds, path):
    tensorio.write_tensors(
        path,
        {"images": ds.images, "labels": ds.labels.astype(np.float64)},
        kind="dataset",
        meta={"n_classes": ds.n_classes, "split": ds.split, "seed": ds.seed},
    )


def load_dataset(path):
    tensors, meta = tensorio.read_tensors(path, kind="dataset")
    return Dataset(
        tensors["images"], tensors["labels"].astype(np.int64), meta["n_classes"], meta["split"], meta["seed"]
    )
