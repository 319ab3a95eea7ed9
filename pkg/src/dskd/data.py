"""Synthetic datasets, split/corruption transforms and the tensor container format.

Container layout (little-endian)::

    b"DSKD" | version u32 | count u32 |
    count x ( name_len u16 | utf-8 name | rank u8 | rank x extent u64 | float32 payload )
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"DSKD"
VERSION = 1


class ContainerError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # B×H×W×C in [0, 1]
    labels: np.ndarray  # B int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in 0..{self.num_classes - 1}")
        if not np.isfinite(self.images).all():
            raise ValueError("images contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def class_template(c: int, num_classes: int, h: int, w: int) -> np.ndarray:
    """Bar oriented at pi*c/C through the centre plus a disk on a ring at 2*pi*c/C."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    theta = np.pi * c / num_classes
    dist = np.abs(-(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta))
    along = np.abs((xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta))
    bar = (dist <= 0.08 * min(h, w) + 0.5) & (along <= 0.38 * min(h, w))
    phi = 2 * np.pi * c / num_classes
    ry, rx = cy + 0.33 * h * np.sin(phi + np.pi / 4), cx + 0.33 * w * np.cos(phi + np.pi / 4)
    disk = (yy - ry) ** 2 + (xx - rx) ** 2 <= (0.12 * min(h, w)) ** 2
    return (bar | disk).astype(np.float32)


def gen_blobs(
    num_classes: int,
    per_class: int,
    height: int = 16,
    width: int = 16,
    noise_sd: float = 0.1,
    seed: int = 0,
    channels: int = 1,
    split: str = "train",
) -> Dataset:
    if num_classes < 2:
        raise ValueError(f"need at least two classes, got {num_classes}")
    if per_class < 0 or noise_sd < 0:
        raise ValueError("per_class and noise_sd must be nonnegative")
    rng = np.random.default_rng(seed)
    templates = np.stack([class_template(c, num_classes, height, width) for c in range(num_classes)])
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    images = templates[labels][..., None].repeat(channels, axis=3)
    if noise_sd > 0:
        images = images + noise_sd * rng.standard_normal(images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images=images, labels=labels, num_classes=num_classes, split=split)


def make_splits(num_classes, train_per_class, test_per_class, height, width, noise_sd, seed, channels=1):
    """Independent train/test draws from one seed."""
    s_train, s_test = np.random.SeedSequence(seed).spawn(2)
    train = gen_blobs(num_classes, train_per_class, height, width, noise_sd, s_train, channels, "train")
    test = gen_blobs(num_classes, test_per_class, height, width, noise_sd, s_test, channels, "test")
    return train, test


def nearest_template_predict(images: np.ndarray, num_classes: int) -> np.ndarray:
    h, w = images.shape[1:3]
    templates = np.stack([class_template(c, num_classes, h, w) for c in range(num_classes)])
    gray = images.mean(axis=3)
    d = ((gray[:, None] - templates[None]) ** 2).sum(axis=(2, 3))
    return d.argmin(axis=1)


def few_shot_split(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep floor(fraction * n_c) items of every class, original order preserved."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        n = int(np.floor(fraction * len(idx) + 1e-9))
        keep.append(np.sort(rng.permutation(idx)[:n]))
    return ds.subset(np.sort(np.concatenate(keep)))


def corrupt_labels(ds: Dataset, ratio: float, seed: int) -> Dataset:
    """Relabel exactly round(ratio * B) items, each to a different class chosen uniformly."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"ratio must lie in [0, 1), got {ratio}")
    if ds.split == "test":
        raise ValueError("refusing to corrupt the test split")
    n = int(np.floor(ratio * len(ds) + 0.5))
    if n == 0:
        return ds
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(ds), size=n, replace=False)
    labels = ds.labels.copy()
    labels[idx] = (labels[idx] + rng.integers(1, ds.num_classes, size=n)) % ds.num_classes
    return replace(ds, labels=labels)


# container ---------------------------------------------------------------------


def write_container(path, tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> None:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise ContainerError(f"{path}: duplicate tensor names")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ContainerError(f"{path}: tensor {name!r} name or rank too large")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def read_container(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ContainerError(f"{path}: truncated file")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise ContainerError(f"{path}: bad magic, not a DSKD container")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise ContainerError(f"{path}: tensor name is not valid UTF-8") from None
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        if name in out:
            raise ContainerError(f"{path}: duplicate tensor name {name!r}")
        out[name] = data
    if pos != len(buf):
        raise ContainerError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def save_dataset(path, ds: Dataset) -> None:
    write_container(path, {"images": ds.images, "labels": ds.labels.astype(np.float32)})


def load_dataset(path, num_classes: int | None = None, split: str = "test") -> Dataset:
    t = read_container(path)
    for key in ("images", "labels"):
        if key not in t:
            raise ContainerError(f"{path}: missing tensor {key!r}")
    labels = t["labels"].astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(images=t["images"], labels=labels, num_classes=num_classes, split=split)
