"""Synthetic segmentation data (shapes on a textured background) and the IMHS file format.

IMHS layout, all little-endian::

    magic "IMHS" | version u16 | count u32 | channels u8 | height u16 | width u16 | num_classes u8
    then `count` records of: image f32[C*H*W] (row-major, values in [0, 1]) | labels u8[H*W]
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator

import numpy as np

MAGIC = b"IMHS"
VERSION = 1
HEADER = struct.Struct("<4sHIBHHB")
HEADER_SIZE = HEADER.size
SHAPE_KINDS = ("rectangle", "disk", "stripe")


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


class TruncatedRecordError(DatasetFormatError):
    pass


class LabelRangeError(DatasetFormatError):
    pass


class InfeasibleSpecError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetHeader:
    count: int
    channels: int
    height: int
    width: int
    num_classes: int
    version: int = VERSION

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.count, self.channels, self.height, self.width, self.num_classes)

    @property
    def record_size(self) -> int:
        return 4 * self.channels * self.height * self.width + self.height * self.width

    def file_size(self) -> int:
        return HEADER_SIZE + self.count * self.record_size


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W float32
    labels: np.ndarray  # N x H x W uint8
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype="<f4")
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],) + self.images.shape[2:]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def header(self) -> DatasetHeader:
        n, c, h, w = self.images.shape
        return DatasetHeader(n, c, h, w, self.num_classes)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes)

    def split(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(0, n_train)), self.subset(slice(n_train, None))


@dataclass(frozen=True)
class GenSpec:
    count: int
    height: int = 16
    width: int = 16
    num_classes: int = 4
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    noise: float = 0.05
    seed: int = 0
    channels: int = 1
    texture: float = 0.0
    min_shape: int = 3

    def validate(self) -> None:
        if self.num_classes < 2:
            raise InfeasibleSpecError("K >= 2 required")
        if self.num_classes > 255:
            raise InfeasibleSpecError("K <= 255 required (labels are stored as bytes)")
        if self.height < 8 or self.width < 8:
            raise InfeasibleSpecError(f"H, W >= 8 required, got {self.height}x{self.width}")
        if self.count < 1:
            raise InfeasibleSpecError("count >= 1 required")
        if self.channels < 1:
            raise InfeasibleSpecError("channels >= 1 required")
        if self.noise < 0 or self.texture < 0:
            raise InfeasibleSpecError("noise and texture must be non-negative")
        bad = set(self.shape_kinds) - set(SHAPE_KINDS)
        if not self.shape_kinds or bad:
            raise InfeasibleSpecError(f"shape kinds must be drawn from {SHAPE_KINDS}, got {self.shape_kinds}")
        if 2 * self.min_shape > min(self.height, self.width):
            raise InfeasibleSpecError(
                f"minimum shape size {self.min_shape} does not fit a {self.height}x{self.width} canvas"
            )


DESK_PRESET = dict(height=16, width=16, num_classes=4, noise=0.05, texture=0.03, channels=1)
DESK_TRAIN, DESK_TEST = 256, 64


def desk_spec(seed: int = 0) -> GenSpec:
    return GenSpec(count=DESK_TRAIN + DESK_TEST, seed=seed, **DESK_PRESET)


def class_intensities(num_classes: int) -> np.ndarray:
    return np.linspace(0.15, 0.85, num_classes)


def rasterize_rectangle(h: int, w: int, top: int, left: int, rh: int, rw: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    mask[top:top + rh, left:left + rw] = True
    return mask


def rasterize_disk(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    """Pixels whose centre (integer row, column) lies within distance r of (cy, cx)."""
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def rasterize_stripe(h: int, w: int, vertical: bool, offset: int, thickness: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    if vertical:
        mask[:, offset:offset + thickness] = True
    else:
        mask[offset:offset + thickness, :] = True
    return mask


def _random_mask(rng: np.random.Generator, kind: str, h: int, w: int, min_shape: int) -> np.ndarray:
    side = min(h, w)
    if kind == "rectangle":
        rh = int(rng.integers(max(min_shape, h // 4), max(min_shape, h // 2) + 1))
        rw = int(rng.integers(max(min_shape, w // 4), max(min_shape, w // 2) + 1))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        return rasterize_rectangle(h, w, top, left, rh, rw)
    if kind == "disk":
        lo = max(min_shape // 2 + 1, side // 8)
        r = int(rng.integers(lo, max(lo, side // 4) + 1))
        cy = int(rng.integers(r, h - r))
        cx = int(rng.integers(r, w - r))
        return rasterize_disk(h, w, cy, cx, r)
    vertical = bool(rng.integers(0, 2))
    extent = w if vertical else h
    thickness = int(rng.integers(2, max(2, extent // 4) + 1))
    offset = int(rng.integers(0, extent - thickness + 1))
    return rasterize_stripe(h, w, vertical, offset, thickness)


def generate_labels(rng: np.random.Generator, spec: GenSpec) -> np.ndarray:
    h, w, k = spec.height, spec.width, spec.num_classes
    for _ in range(100):
        n_shapes = int(rng.integers(1, k))
        classes = rng.choice(np.arange(1, k), size=n_shapes, replace=False)
        labels = np.zeros((h, w), dtype=np.uint8)
        for cls in classes:
            kind = spec.shape_kinds[int(rng.integers(0, len(spec.shape_kinds)))]
            labels[_random_mask(rng, kind, h, w, spec.min_shape)] = cls
        if (labels == 0).any():
            return labels
    raise InfeasibleSpecError("could not place shapes while keeping background visible")


def render(labels: np.ndarray, spec: GenSpec, rng: np.random.Generator) -> np.ndarray:
    base = class_intensities(spec.num_classes)[labels]
    img = np.repeat(base[None], spec.channels, axis=0)
    if spec.texture > 0:
        h, w = labels.shape
        fy, fx = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi / np.array([h, w])
        phase = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        tex = spec.texture * np.sin(fy * yy + fx * xx + phase)
        img = img + np.where(labels == 0, tex, 0.0)[None]
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype("<f4")


def generate(spec: GenSpec) -> Dataset:
    """Deterministic under ``spec.seed``; geometry and pixel noise use separate streams."""
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(spec.count)
    images = np.empty((spec.count, spec.channels, spec.height, spec.width), dtype="<f4")
    labels = np.empty((spec.count, spec.height, spec.width), dtype=np.uint8)
    for i, ss in enumerate(children):
        geo_ss, pix_ss = ss.spawn(2)
        labels[i] = generate_labels(np.random.default_rng(geo_ss), spec)
        images[i] = render(labels[i], spec, np.random.default_rng(pix_ss))
    return Dataset(images, labels, spec.num_classes)


# ---------------------------------------------------------------------------
# file format


def write(dataset: Dataset, path: str | os.PathLike) -> None:
    header = dataset.header
    if header.count < 1:
        raise DatasetFormatError("cannot write an empty dataset")
    if dataset.labels.max(initial=0) >= dataset.num_classes:
        raise LabelRangeError("label >= num_classes")
    with open(path, "wb") as f:
        f.write(header.pack())
        for img, lab in zip(dataset.images, dataset.labels):
            f.write(img.astype("<f4").tobytes(order="C"))
            f.write(lab.astype(np.uint8).tobytes(order="C"))


def read_header(f: BinaryIO) -> DatasetHeader:
    raw = f.read(HEADER_SIZE)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < HEADER_SIZE:
        raise TruncatedRecordError("truncated header")
    _, version, count, channels, height, width, k = HEADER.unpack(raw)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported IMHS version {version}")
    if count < 1:
        raise DatasetFormatError("header count must be >= 1")
    return DatasetHeader(count, channels, height, width, k, version)


def iter_records(path: str | os.PathLike) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Stream (image, labels) pairs one record at a time."""
    with open(path, "rb") as f:
        header = read_header(f)
        n_img = header.channels * header.height * header.width
        n_lab = header.height * header.width
        for i in range(header.count):
            raw = f.read(header.record_size)
            if len(raw) != header.record_size:
                raise TruncatedRecordError(f"record {i} truncated ({len(raw)} of {header.record_size} bytes)")
            img = np.frombuffer(raw, dtype="<f4", count=n_img).reshape(header.channels, header.height, header.width)
            lab = np.frombuffer(raw, dtype=np.uint8, count=n_lab, offset=4 * n_img).reshape(header.height, header.width)
            if lab.max() >= header.num_classes:
                raise LabelRangeError(f"record {i} has label {lab.max()} >= num_classes {header.num_classes}")
            yield img, lab


def read(path: str | os.PathLike) -> Dataset:
    with open(path, "rb") as f:
        header = read_header(f)
    images = np.empty((header.count, header.channels, header.height, header.width), dtype="<f4")
    labels = np.empty((header.count, header.height, header.width), dtype=np.uint8)
    for i, (img, lab) in enumerate(iter_records(path)):
        images[i] = img
        labels[i] = lab
    return Dataset(images, labels, header.num_classes)


def read_header_file(path: str | os.PathLike) -> DatasetHeader:
    with open(path, "rb") as f:
        return read_header(f)

