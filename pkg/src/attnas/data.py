"""Datasets, deterministic splits, and persistence.

Includes a loader for the standard CIFAR binary batch layout (1 label byte +
3072 channel-planar pixel bytes per record), a procedural shape corpus for
CPU-scale runs, and two persistence formats: architecture JSON and a
little-endian length-prefixed blob container for checkpoints.

Checkpoint container byte layout (all integers little-endian):

    magic  8 bytes  b"ATNASCKP"
    u32    format version (currently 1)
    u32    blob count
    per blob:
        u32  name length, then that many UTF-8 name bytes
        u8   kind: 0 raw bytes, 1 float64, 2 float32, 3 int64
        u8   ndim, then ndim x u64 dims (absent for raw bytes)
        u64  payload byte length, then the payload

Writes go through a temp file + rename so a crash never leaves a torn file.
"""

from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import CheckpointError, ConfigError, DataError
from .supernet import Architecture

CIFAR_RECORD = 3073
CHECKPOINT_MAGIC = b"ATNASCKP"
CHECKPOINT_VERSION = 1


@dataclass
class ImageDataset:
    """Images in [0, 1] as (N, H, W, 3) floats, with optional integer labels.

    ``mean``/``std`` are per-channel statistics of the split the dataset was
    created from; subsets inherit them unchanged.
    """

    images: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    mean: np.ndarray
    std: np.ndarray
    tag: str = ""

    def __post_init__(self):
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise DataError(
                    f"{len(self.images)} images but {len(self.labels)} labels"
                )
            if len(self.labels) and (
                self.labels.min() < 0 or self.labels.max() >= self.num_classes
            ):
                raise DataError(
                    f"labels must lie in [0, {self.num_classes}), found range "
                    f"[{self.labels.min()}, {self.labels.max()}]"
                )

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, indices, tag: str = "") -> "ImageDataset":
        labels = self.labels[indices] if self.labels is not None else None
        return replace(self, images=self.images[indices], labels=labels, tag=tag or self.tag)

    @staticmethod
    def from_arrays(images, labels, num_classes: int, tag: str = "") -> "ImageDataset":
        images = np.asarray(images, dtype=np.float64)
        mean = images.mean(axis=(0, 1, 2))
        std = images.std(axis=(0, 1, 2))
        std = np.where(std < 1e-8, 1.0, std)
        return ImageDataset(images, labels, num_classes, mean, std, tag)


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic two-way partition of a dataset by shuffled indices."""

    ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"split ratio must lie in (0, 1), got {self.ratio}")


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_a = int(round(n * spec.ratio))
    return perm[:n_a], perm[n_a:]


def split(dataset: ImageDataset, spec: SplitSpec) -> tuple[ImageDataset, ImageDataset]:
    """Exact partition into two parts; both inherit the parent's statistics."""
    idx_a, idx_b = split_indices(len(dataset), spec)
    return dataset.subset(idx_a, tag=f"{dataset.tag}/a"), dataset.subset(idx_b, tag=f"{dataset.tag}/b")


# ---------------------------------------------------------------------------
# CIFAR binary batches
# ---------------------------------------------------------------------------

def load_cifar_binary(path) -> ImageDataset:
    """Load one CIFAR-10 binary batch file (label byte + R,G,B planes)."""
    raw = np.fromfile(str(path), dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
        raise DataError(
            f"{path}: truncated CIFAR batch, {raw.size} bytes is not a multiple of "
            f"{CIFAR_RECORD} (first incomplete record at byte {raw.size - raw.size % CIFAR_RECORD})"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{path}: corrupt record {bad}: label {labels[bad]} > 9")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    images = pixels.astype(np.float64) / 255.0
    return ImageDataset.from_arrays(images, labels, num_classes=10, tag=str(path))


def load_cifar_dir(path) -> tuple[ImageDataset, ImageDataset]:
    """Load data_batch_*.bin as the train split and test_batch.bin as test."""
    names = sorted(f for f in os.listdir(path) if f.startswith("data_batch"))
    if not names:
        raise DataError(f"{path}: no data_batch_*.bin files found")
    parts = [load_cifar_binary(os.path.join(path, n)) for n in names]
    images = np.concatenate([p.images for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    train = ImageDataset.from_arrays(images, labels, num_classes=10, tag="cifar/train")
    test_path = os.path.join(path, "test_batch.bin")
    test = load_cifar_binary(test_path)
    # evaluation uses training statistics
    test = replace(test, mean=train.mean, std=train.std, tag="cifar/test")
    return train, test


# ---------------------------------------------------------------------------
# procedural shape corpus
# ---------------------------------------------------------------------------

SHAPE_KINDS = (
    "rectangle", "disc", "cross", "ring", "triangle",
    "diag_cross", "diamond", "h_bar", "v_bar", "checker",
)


def _shape_mask(kind: int, size: int, cy: float, cx: float, ext: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    half = ext / 2.0
    thick = max(1.2, ext * 0.14)
    name = SHAPE_KINDS[kind]
    if name == "rectangle":
        return (np.abs(dy) <= half * 0.8) & (np.abs(dx) <= half)
    if name == "disc":
        return dy * dy + dx * dx <= half * half
    if name == "cross":
        arm = (np.abs(dy) <= thick) & (np.abs(dx) <= half)
        return arm | ((np.abs(dx) <= thick) & (np.abs(dy) <= half))
    if name == "ring":
        r2 = dy * dy + dx * dx
        return (r2 <= half * half) & (r2 >= (half - thick) ** 2)
    if name == "triangle":
        return (dy >= -half) & (dy <= half) & (np.abs(dx) <= (dy + half) / 2.0)
    if name == "diag_cross":
        inside = (np.abs(dy) <= half) & (np.abs(dx) <= half)
        return inside & ((np.abs(dy - dx) <= thick * 1.4) | (np.abs(dy + dx) <= thick * 1.4))
    if name == "diamond":
        return np.abs(dy) + np.abs(dx) <= half
    if name == "h_bar":
        return (np.abs(dy) <= thick) & (np.abs(dx) <= half)
    if name == "v_bar":
        return (np.abs(dx) <= thick) & (np.abs(dy) <= half)
    if name == "checker":
        inside = (np.abs(dy) <= half) & (np.abs(dx) <= half)
        cell = max(2, int(ext / 4))
        phase = ((yy // cell) + (xx // cell)) % 2 == 0
        return inside & phase
    raise ConfigError(f"unknown shape kind {kind}")


def synth_shapes(seed: int, n: int, size: int = 16, classes: int = 3) -> ImageDataset:
    """Procedural images: one large random shape per textured noise background.

    The class is the shape kind (assigned round-robin, so the histogram is
    balanced within one). Shapes span more than half the image so that global
    structure matters. Deterministic given the seed.
    """
    if not 2 <= classes <= 10:
        raise ConfigError(f"classes must lie in [2, 10], got {classes}")
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size, 3), dtype=np.float64)
    labels = np.arange(n, dtype=np.int64) % classes
    for i in range(n):
        base = rng.uniform(0.15, 0.85, size=3)
        coarse = np.kron(rng.normal(0.0, 1.0, (4, 4)), np.ones((size // 4 + 1, size // 4 + 1)))
        coarse = coarse[:size, :size]
        img = base[None, None, :] + 0.06 * coarse[..., None]
        img += 0.03 * rng.normal(0.0, 1.0, (size, size, 3))

        color = rng.uniform(0.0, 1.0, size=3)
        if np.abs(color - base).max() < 0.3:
            color = np.clip(1.0 - base, 0.0, 1.0)
        cy = rng.uniform(0.38, 0.62) * size
        cx = rng.uniform(0.38, 0.62) * size
        ext = rng.uniform(0.55, 0.85) * size
        mask = _shape_mask(int(labels[i]), size, cy, cx, ext)
        img[mask] = color[None, :] + 0.02 * rng.normal(0.0, 1.0, (int(mask.sum()), 3))
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageDataset.from_arrays(images, labels, num_classes=classes, tag=f"synth{classes}")


# ---------------------------------------------------------------------------
# blob container (checkpoints)
# ---------------------------------------------------------------------------

_KIND_BYTES, _KIND_F64, _KIND_F32, _KIND_I64 = 0, 1, 2, 3
_DTYPES = {_KIND_F64: "<f8", _KIND_F32: "<f4", _KIND_I64: "<i8"}


def _blob_kind(value) -> int:
    if isinstance(value, (bytes, bytearray)):
        return _KIND_BYTES
    v = np.asarray(value)
    if v.dtype == np.float64:
        return _KIND_F64
    if v.dtype == np.float32:
        return _KIND_F32
    if v.dtype == np.int64:
        return _KIND_I64
    raise CheckpointError(f"unsupported blob dtype {v.dtype}")


def save_blobs(path, blobs: dict) -> None:
    """Write named arrays/bytes to ``path`` atomically (temp + rename)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blobs)))
    for name, value in blobs.items():
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        kind = _blob_kind(value)
        buf.write(struct.pack("<B", kind))
        if kind == _KIND_BYTES:
            payload = bytes(value)
        else:
            v = np.asarray(value)
            buf.write(struct.pack("<B", v.ndim))
            for dim in v.shape:
                buf.write(struct.pack("<Q", dim))
            payload = np.ascontiguousarray(v).astype(_DTYPES[kind]).tobytes()
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_blobs(path) -> dict:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version} is not supported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    off = 16
    blobs = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode()
            off += nlen
            (kind,) = struct.unpack_from("<B", data, off)
            off += 1
            if kind == _KIND_BYTES:
                shape = None
            else:
                (ndim,) = struct.unpack_from("<B", data, off)
                off += 1
                shape = struct.unpack_from(f"<{ndim}Q", data, off) if ndim else ()
                off += 8 * ndim
            (plen,) = struct.unpack_from("<Q", data, off)
            off += 8
            payload = data[off:off + plen]
            if len(payload) != plen:
                raise CheckpointError(f"{path}: truncated blob {name!r}")
            off += plen
            if kind == _KIND_BYTES:
                blobs[name] = bytes(payload)
            else:
                arr = np.frombuffer(payload, dtype=_DTYPES[kind]).reshape(shape)
                blobs[name] = arr.astype(_DTYPES[kind].lstrip("<")).copy()
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint ({e})") from e
    return blobs


# ---------------------------------------------------------------------------
# architecture files and metrics tables
# ---------------------------------------------------------------------------

def save_arch(arch: Architecture, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(arch.to_json())
    os.replace(tmp, path)


def load_arch(path) -> Architecture:
    with open(path) as f:
        return Architecture.from_json(f.read())


def write_csv(path, header, rows) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        return header, [row for row in r]
