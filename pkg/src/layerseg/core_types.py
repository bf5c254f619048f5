"""Class taxonomy, shared array types and their validation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


class ValidationError(ValueError):
    """Raised when an array violates a domain invariant."""


class ShapeError(ValidationError):
    pass


@dataclass(frozen=True)
class ClassTaxonomy:
    names: tuple[str, ...]
    short_names: tuple[str, ...]
    colors: tuple[tuple[int, int, int], ...]  # RGB

    def __post_init__(self):
        if not (len(self.names) == len(self.short_names) == len(self.colors)):
            raise ValidationError("taxonomy fields must have equal length")
        if len(set(self.colors)) != len(self.colors):
            raise ValidationError("class colors must be distinct")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        if name in self.names:
            return self.names.index(name)
        return self.short_names.index(name)

    def palette(self) -> np.ndarray:
        """C x 3 uint8 RGB palette."""
        return np.asarray(self.colors, dtype=np.uint8)


TAXONOMY = ClassTaxonomy(
    names=("background", "kernel", "buffer", "IPyC", "SiC", "OPyC"),
    short_names=("BG", "Kernel", "Buffer", "IPyC", "SiC", "OPyC"),
    colors=(
        (0, 0, 0),
        (255, 0, 0),
        (0, 255, 0),
        (0, 0, 255),
        (255, 255, 0),
        (255, 0, 255),
    ),
)
NUM_CLASSES = TAXONOMY.num_classes
BACKGROUND, KERNEL, BUFFER, IPYC, SIC, OPYC = range(NUM_CLASSES)


def validate_mask(mask: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.issubdtype(mask.dtype, np.integer):
        raise ValidationError(f"label mask must be integer typed, got {mask.dtype}")
    bad = (mask < 0) | (mask >= num_classes)
    if bad.any():
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(
            f"label {int(mask[loc])} at {loc} outside [0, {num_classes - 1}]"
        )
    return mask


def validate_probs(probs: np.ndarray, atol: float = 1e-5) -> np.ndarray:
    """Check an H x W x C (or ... x C) probability map."""
    probs = np.asarray(probs)
    if probs.ndim < 1 or probs.shape[-1] < 2:
        raise ValidationError(f"probability map needs a class axis, got shape {probs.shape}")
    if probs.size and (probs.min() < -atol or probs.max() > 1 + atol):
        raise ValidationError("probabilities must lie in [0, 1]")
    sums = probs.sum(axis=-1)
    if sums.size and np.abs(sums - 1).max() > atol:
        raise ValidationError(f"per-pixel probabilities must sum to 1 (max dev {np.abs(sums - 1).max():.2e})")
    return probs


def validate_soft_labels(soft: np.ndarray) -> np.ndarray:
    soft = np.asarray(soft)
    if soft.size and (soft.min() < -1 or soft.max() > 1):
        raise ValidationError("soft labels must lie in [-1, 1]")
    return soft


@dataclass(frozen=True)
class ImageSample:
    """One preprocessed particle crop: H x W x 3 image in [0, 1] plus its label mask."""

    image: np.ndarray
    mask: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"image must be H x W x 3, got {self.image.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise ShapeError(
                f"image {self.image.shape[:2]} and mask {self.mask.shape} differ in size"
            )
        if self.image.size and (self.image.min() < 0 or self.image.max() > 1):
            raise ValidationError("image values must lie in [0, 1]")
        validate_mask(self.mask)


def one_hot(mask: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Expand an index-encoded mask to ... x C with a single 1 per pixel."""
    mask = validate_mask(mask, num_classes)
    return (mask[..., None] == np.arange(num_classes)).astype(np.uint8)


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel most probable class; ties go to the lowest class index."""
    probs = np.asarray(probs)
    if probs.ndim < 1 or probs.shape[-1] < 1:
        raise ValidationError(f"probability map needs a class axis, got shape {probs.shape}")
    # np.argmax returns the first maximal index
    return np.argmax(probs, axis=-1).astype(np.int64)
