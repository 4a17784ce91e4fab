"""Datasets: CIFAR binary batches and a synthetic colored-shape set."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

RECORD_PIXELS = 3 * 32 * 32


class DataError(ValueError):
    def __init__(self, message: str, offset: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f" in {path}"
        if offset is not None:
            where += f" at byte offset {offset}"
        super().__init__(message + where)
        self.offset = offset


@dataclass
class Dataset:
    images: torch.Tensor  # (N, C, H, W) in [0, 1]
    labels: torch.Tensor  # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be 4-D, got shape {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise DataError(f"label {int(self.labels.max())} >= class count {self.num_classes}")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values outside [0, 1]")
        if self.split not in ("train", "test"):
            raise DataError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, count: int, offset: int = 0) -> "Dataset":
        if offset + count > len(self):
            raise DataError(f"requested {count} samples from offset {offset}, only {len(self)} available")
        sl = slice(offset, offset + count)
        return Dataset(self.images[sl], self.labels[sl], self.num_classes, self.split)

    def batches(self, batch_size: int, generator: torch.Generator | None = None):
        order = torch.randperm(len(self), generator=generator) if generator is not None else torch.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx], self.labels[idx]


def read_batch(path: str | Path, num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch of 3073-byte records (label, then R, G, B planes)."""
    raw = Path(path).read_bytes()
    record = 1 + RECORD_PIXELS
    if len(raw) % record:
        offset = (len(raw) // record) * record
        raise DataError(f"truncated record ({len(raw) - offset} of {record} bytes)", offset, str(path))
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = rows[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if len(bad):
        raise DataError(f"label {labels[bad[0]]} >= class count {num_classes}", int(bad[0]) * record, str(path))
    pixels = rows[:, 1:].reshape(-1, 3, 32, 32)
    return pixels, labels


def write_batch(path: str | Path, pixels: np.ndarray, labels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), RECORD_PIXELS)
    rows = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(rows.tobytes())


def load_cifar_binary(directory: str | Path, split: str = "train", num_classes: int = 10) -> Dataset:
    directory = Path(directory)
    pattern = "data_batch_*.bin" if split == "train" else "test_batch*.bin"
    files = sorted(directory.glob(pattern))
    if not files:
        raise DataError(f"no '{pattern}' files in {directory}")
    parts = [read_batch(f, num_classes) for f in files]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([lab for _, lab in parts])
    images = torch.from_numpy(pixels.astype(np.float32) / 255.0)
    return Dataset(images, torch.from_numpy(labels), num_classes, split)


def _shape_mask(kind: int, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    kind %= 8
    if kind == 0:  # disk
        return dy**2 + dx**2 <= r**2
    if kind == 1:  # square
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == 2:  # triangle
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == 3:  # plus
        return ((np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r))
    if kind == 4:  # ring
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == 5:  # diamond
        return np.abs(dy) + np.abs(dx) <= r
    if kind == 6:  # horizontal bar
        return (np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r)
    return (np.abs(dx) <= r * 0.35) & (np.abs(dy) <= r)  # vertical bar


def _hsv_pixel(h: float, s: float, v: float) -> np.ndarray:
    k = (np.array([5.0, 3.0, 1.0]) + h * 3.0 / math.pi) % 6.0
    return v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def synthetic_dataset(seed: int, classes: int = 10, size: int = 1024, resolution: int = 16,
                      split: str = "train") -> Dataset:
    """Colored shapes on a dim noisy background; class k has its own hue and shape."""
    if classes < 2:
        raise DataError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(size) % classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    images = np.empty((size, 3, resolution, resolution), dtype=np.float32)
    for n, k in enumerate(labels):
        bg = rng.uniform(0.05, 0.25) + rng.normal(0.0, 0.03, (3, resolution, resolution))
        r = resolution * rng.uniform(0.25, 0.35)
        cy = resolution / 2 + rng.uniform(-1.5, 1.5)
        cx = resolution / 2 + rng.uniform(-1.5, 1.5)
        mask = _shape_mask(int(k), yy, xx, cy, cx, r)
        hue = (2 * math.pi * k / classes + rng.normal(0.0, 0.08)) % (2 * math.pi)
        color = _hsv_pixel(hue, rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0))
        img = np.where(mask[None], color[:, None, None] + rng.normal(0.0, 0.02, bg.shape), bg)
        images[n] = np.clip(img, 0.0, 1.0)
    return Dataset(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)), classes, split)
