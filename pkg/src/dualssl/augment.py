"""Seeded image augmentation for the two training stages.

Images are numpy arrays ``[C, H, W]`` with pixels in ``[0, 1]``.  The output of
:func:`apply` depends only on ``(image, spec, seed)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError
from .rng import CounterRNG, derive_seed


@dataclass
class AugmentSpec:
    rotation_max_degrees: float = 0.0
    hflip_prob: float = 0.0
    vflip_prob: float = 0.0
    jitter_brightness: float = 0.0
    jitter_contrast: float = 0.0
    grayscale_prob: float = 0.0
    normalize_mean: tuple = (0.5,)
    normalize_std: tuple = (0.5,)
    resize_to: Optional[int] = None

    def __post_init__(self):
        self.normalize_mean = tuple(float(v) for v in np.atleast_1d(self.normalize_mean))
        self.normalize_std = tuple(float(v) for v in np.atleast_1d(self.normalize_std))
        self.validate()

    def validate(self) -> None:
        for name in ("hflip_prob", "vflip_prob", "grayscale_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        for name in ("rotation_max_degrees", "jitter_brightness", "jitter_contrast"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if any(s <= 0 for s in self.normalize_std):
            raise ConfigError("normalize_std must be positive")
        if len(self.normalize_mean) != len(self.normalize_std):
            raise ConfigError("normalize_mean and normalize_std must have the same length")
        if self.resize_to is not None and self.resize_to < 1:
            raise ConfigError("resize_to must be a positive pixel count")

    def replace(self, **changes) -> "AugmentSpec":
        return dataclasses.replace(self, **changes)


def pretrain_spec() -> AugmentSpec:
    """Rotations, flips, grayscale, brightness/contrast jitter, normalization."""
    return AugmentSpec(rotation_max_degrees=15.0, hflip_prob=0.5, vflip_prob=0.5,
                       jitter_brightness=0.2, jitter_contrast=0.2, grayscale_prob=0.2)


def finetune_spec(image_size: int = 28) -> AugmentSpec:
    """Resize, rotations, flips, brightness/contrast jitter, normalization."""
    return AugmentSpec(rotation_max_degrees=15.0, hflip_prob=0.5, vflip_prob=0.5,
                       jitter_brightness=0.2, jitter_contrast=0.2, resize_to=image_size)


def identity_spec(mean: float = 0.5, std: float = 0.5) -> AugmentSpec:
    """Normalization only; also used at evaluation time."""
    return AugmentSpec(normalize_mean=(mean,), normalize_std=(std,))


def eval_spec(spec: AugmentSpec) -> AugmentSpec:
    """Deterministic counterpart of ``spec``: same resize and normalization, nothing random."""
    return AugmentSpec(normalize_mean=spec.normalize_mean, normalize_std=spec.normalize_std,
                       resize_to=spec.resize_to)


PRESETS = {"pretrain": pretrain_spec, "finetune": finetune_spec, "identity": identity_spec}


def normalize(image: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    c = image.shape[0]
    mean = np.asarray(spec.normalize_mean, dtype=np.float64)
    std = np.asarray(spec.normalize_std, dtype=np.float64)
    if mean.size not in (1, c):
        raise ShapeError(f"normalization has {mean.size} channels, image has {c}")
    return (image - mean.reshape(-1, 1, 1)) / std.reshape(-1, 1, 1)


def resize(image: np.ndarray, size: int) -> np.ndarray:
    c, h, w = image.shape
    if (h, w) == (size, size):
        return image
    return ndimage.zoom(image, (1, size / h, size / w), order=1, mode="nearest", grid_mode=True)


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image centre, zero outside the source."""
    if degrees == 0.0:
        return image
    return ndimage.rotate(image, degrees, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)


def _apply(image: np.ndarray, spec: AugmentSpec, rng: CounterRNG) -> np.ndarray:
    # one fixed-length draw per image keeps the stream layout independent of branch outcomes
    u = rng.uniform(7)
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected a [C, H, W] image, got shape {x.shape}")
    if spec.resize_to is not None:
        x = resize(x, spec.resize_to)
    if spec.rotation_max_degrees > 0:
        x = rotate(x, (2 * u[0] - 1) * spec.rotation_max_degrees)
    if u[1] < spec.hflip_prob:
        x = x[:, :, ::-1]
    if u[2] < spec.vflip_prob:
        x = x[:, ::-1, :]
    if u[3] < spec.grayscale_prob and x.shape[0] == 3:
        lum = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]
        x = np.broadcast_to(lum, x.shape)
    if spec.jitter_brightness > 0:
        x = x * (1.0 + (2 * u[4] - 1) * spec.jitter_brightness)
    if spec.jitter_contrast > 0:
        m = x.mean()
        x = (x - m) * (1.0 + (2 * u[5] - 1) * spec.jitter_contrast) + m
    x = np.clip(x, 0.0, 1.0)
    return np.ascontiguousarray(normalize(x, spec))


def apply(image: np.ndarray, spec: AugmentSpec, seed: int) -> np.ndarray:
    """Augment one image; normalization is always the last step."""
    return _apply(image, spec, CounterRNG(seed))


def dual_view(image: np.ndarray, spec: AugmentSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independent augmentations drawn from sub-streams 1 and 2 of ``seed``."""
    return apply(image, spec, derive_seed(seed, 1)), apply(image, spec, derive_seed(seed, 2))


def apply_batch(images: np.ndarray, spec: AugmentSpec, seeds) -> np.ndarray:
    return np.stack([apply(img, spec, s) for img, s in zip(images, seeds)])


def dual_view_batch(images: np.ndarray, spec: AugmentSpec, seeds) -> tuple[np.ndarray, np.ndarray]:
    pairs = [dual_view(img, spec, s) for img, s in zip(images, seeds)]
    return np.stack([a for a, _ in pairs]), np.stack([b for _, b in pairs])
