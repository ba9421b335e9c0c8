"""Image datasets: the OCTB container, CSV import, stratification, synthesis.

OCTB layout (little-endian)::

    offset  size  field
    0       4     magic b"OCTB"
    4       2     version (u16, = 1)
    6       2     flags (u16, bit0 = labels present)
    8       4     n (u32)
    12      2     C (u16)
    14      2     H (u16)
    16      2     W (u16)
    18      2     K (u16)
    20      6     reserved (zero)
    26      n*C*H*W  pixels (u8, value/255)
    ...     n     labels (u8), only if flag bit0 is set
    ...     4     CRC32 of pixels + labels (u32)
"""

from __future__ import annotations

import dataclasses
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .rng import CounterRNG

MAGIC = b"OCTB"
VERSION = 1
_HEADER = struct.Struct("<4sHHIHHHH6x")
DEFAULT_CLASS_NAMES = ("CNV", "DME", "Drusen", "Normal")
SPLIT_TAGS = ("train", "val", "test", "unlabeled")


def _default_names(k: int) -> list[str]:
    return list(DEFAULT_CLASS_NAMES) if k == 4 else [f"class{i}" for i in range(k)]


@dataclass
class ImageDataset:
    """``images`` is ``[n, C, H, W]`` float64 in [0, 1]; ``labels`` is optional."""

    images: np.ndarray
    labels: Optional[np.ndarray] = None
    class_names: list = field(default_factory=lambda: list(DEFAULT_CLASS_NAMES))
    split_tag: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [n, C, H, W], got shape {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values must lie in [0, 1]")
        if self.split_tag not in SPLIT_TAGS:
            raise DataError(f"split_tag must be one of {SPLIT_TAGS}, got {self.split_tag!r}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise DataError(f"{len(self.labels)} labels for {len(self.images)} images")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise DataError(f"labels must be in [0, {self.num_classes})")

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, indices, split_tag: Optional[str] = None) -> "ImageDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return ImageDataset(self.images[indices],
                            None if self.labels is None else self.labels[indices],
                            list(self.class_names), split_tag or self.split_tag)

    def unlabeled(self) -> "ImageDataset":
        return dataclasses.replace(self, labels=None, split_tag="unlabeled")

    def class_counts(self) -> np.ndarray:
        if self.labels is None:
            raise DataError("dataset has no labels")
        return np.bincount(self.labels, minlength=self.num_classes)


def quantize(images: np.ndarray) -> np.ndarray:
    """Round pixels to the u8 grid (value/255) that OCTB stores exactly."""
    return np.rint(np.clip(images, 0.0, 1.0) * 255.0) / 255.0


# ---------------------------------------------------------------------------
# OCTB
# ---------------------------------------------------------------------------

def encode_octb(dataset: ImageDataset) -> bytes:
    n, c, h, w = dataset.images.shape
    k = dataset.num_classes
    has_labels = dataset.labels is not None
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    payload = pixels.tobytes(order="C")
    if has_labels:
        payload += dataset.labels.astype(np.uint8).tobytes()
    header = _HEADER.pack(MAGIC, VERSION, int(has_labels), n, c, h, w, k)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def decode_octb(blob: bytes, split_tag: Optional[str] = None,
                class_names: Optional[list] = None) -> ImageDataset:
    if len(blob) < _HEADER.size or blob[:4] != MAGIC:
        raise FormatError(f"not an OCTB file: expected magic {MAGIC!r}, found {blob[:4]!r}")
    magic, version, flags, n, c, h, w, k = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise FormatError(f"unsupported OCTB version {version}")
    has_labels = bool(flags & 1)
    npix = n * c * h * w
    expected = _HEADER.size + npix + (n if has_labels else 0) + 4
    if len(blob) != expected:
        raise FormatError(f"OCTB length error: expected {expected} bytes, found {len(blob)}")
    payload = blob[_HEADER.size:expected - 4]
    (crc,) = struct.unpack_from("<I", blob, expected - 4)
    if zlib.crc32(payload) != crc:
        raise FormatError("OCTB CRC32 mismatch: payload is corrupted")
    images = np.frombuffer(payload, dtype=np.uint8, count=npix).reshape(n, c, h, w) / 255.0
    labels = None
    if has_labels:
        labels = np.frombuffer(payload, dtype=np.uint8, offset=npix, count=n).astype(np.int64)
        if n and labels.max() >= k:
            bad = int(np.argmax(labels >= k))
            raise DataError(f"label {labels[bad]} at index {bad} is out of range for K={k}")
    names = list(class_names) if class_names is not None else _default_names(k)
    tag = split_tag or ("train" if has_labels else "unlabeled")
    return ImageDataset(images, labels, names, tag)


def save_octb(dataset: ImageDataset, path) -> None:
    Path(path).write_bytes(encode_octb(dataset))


def load_octb(path, split_tag: Optional[str] = None, class_names: Optional[list] = None) -> ImageDataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    return decode_octb(path.read_bytes(), split_tag, class_names)


# ---------------------------------------------------------------------------
# CSV import
# ---------------------------------------------------------------------------

def import_medmnist_csv(images_csv, labels_csv=None, image_size: int = 28,
                        num_classes: int = 4, split_tag: str = "train") -> ImageDataset:
    """Read one comma-separated ``[0, 255]`` image per row plus an optional label column file."""
    rows = []
    npix = image_size * image_size
    with open(images_csv) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            values = line.split(",")
            if len(values) != npix:
                raise DataError(f"row {i}: expected {npix} pixel values, found {len(values)}")
            rows.append(values)
    try:
        pixels = np.array(rows, dtype=np.int64).reshape(-1, 1, image_size, image_size)
    except ValueError as exc:
        raise DataError(f"non-integer pixel value in {images_csv}: {exc}") from None
    if pixels.size and (pixels.min() < 0 or pixels.max() > 255):
        bad = int(np.argmax((pixels < 0).any(axis=(1, 2, 3)) | (pixels > 255).any(axis=(1, 2, 3))))
        raise DataError(f"row {bad}: pixel values must be integers in [0, 255]")
    labels = None
    if labels_csv is not None:
        with open(labels_csv) as fh:
            labels = np.array([int(v) for v in (ln.strip() for ln in fh) if v], dtype=np.int64)
        if len(labels) != len(pixels):
            raise DataError(f"length error: {len(pixels)} image rows but {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            bad = int(np.argmax((labels < 0) | (labels >= num_classes)))
            raise DataError(f"row {bad}: label {labels[bad]} outside [0, {num_classes})")
    return ImageDataset(pixels / 255.0, labels, _default_names(num_classes),
                        split_tag if labels is not None else "unlabeled")


# ---------------------------------------------------------------------------
# stratification
# ---------------------------------------------------------------------------

def largest_remainder_counts(class_counts, fraction: float) -> np.ndarray:
    """Per-class sample counts summing to ``round(fraction * total)``.

    Each class gets ``floor(fraction * count)``; the leftover units go to the
    classes with the largest fractional parts (ties to the lower class id).
    """
    counts = np.asarray(class_counts, dtype=np.int64)
    quotas = fraction * counts
    base = np.floor(quotas).astype(np.int64)
    target = int(np.floor(fraction * counts.sum() + 0.5))
    leftover = target - int(base.sum())
    order = np.argsort(-(quotas - base), kind="stable")
    base[order[:leftover]] += 1
    return np.minimum(base, counts)


def stratified_subsample_indices(labels, fraction: float, seed: int) -> np.ndarray:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if labels.size else 0
    take = largest_remainder_counts(np.bincount(labels, minlength=k), fraction)
    rng = CounterRNG(seed)
    chosen = []
    for c in range(k):
        members = np.flatnonzero(labels == c)
        chosen.append(members[rng.split(c).permutation(len(members))[:take[c]]])
    picked = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    return picked[rng.split(10_000).permutation(len(picked))]


def stratified_subsample(dataset: ImageDataset, fraction: float, seed: int) -> ImageDataset:
    """Class-proportional random subset, returned in a seeded random order."""
    if dataset.labels is None:
        raise ConfigError("stratified_subsample needs a labeled dataset")
    return dataset.subset(stratified_subsample_indices(dataset.labels, fraction, seed))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_per_class: int = 100
    image_size: int = 28
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.image_size < 4:
            raise ConfigError("image_size must be >= 4")


def class_templates(image_size: int) -> np.ndarray:
    """The four noise-free class patterns, ``[4, H, W]``."""
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s]
    period = max(2, s // 7)
    hbands = np.where((yy // period) % 2 == 0, 0.8, 0.2)
    vbands = np.where((xx // period) % 2 == 0, 0.8, 0.2)
    c = (s - 1) / 2
    disk = np.where((yy - c) ** 2 + (xx - c) ** 2 <= (0.3 * s) ** 2, 0.8, 0.2)
    uniform = np.full((s, s), 0.5)
    return np.stack([hbands, vbands, disk, uniform])


def synth_generate(spec: SyntheticSpec) -> ImageDataset:
    """Four separable classes plus Gaussian pixel noise, ordered by class."""
    templates = class_templates(spec.image_size)
    n = spec.n_per_class
    labels = np.repeat(np.arange(4), n)
    images = templates[labels][:, None, :, :]
    if spec.noise_sigma > 0:
        noise = CounterRNG(spec.seed).normal(images.shape, scale=spec.noise_sigma)
        images = images + noise
    return ImageDataset(quantize(images), labels, list(DEFAULT_CLASS_NAMES), "train")
