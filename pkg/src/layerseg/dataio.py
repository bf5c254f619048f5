"""Loading, preprocessing and training-time augmentation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import cv2
import numpy as np

from .core_types import ImageSample, ValidationError, validate_mask
from .synthgen import DatasetManifest

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class Normalizer:
    """Per-channel standardization applied to model inputs."""

    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    @classmethod
    def imagenet(cls) -> "Normalizer":
        return cls(IMAGENET_MEAN, IMAGENET_STD)

    @classmethod
    def from_samples(cls, samples: Sequence[ImageSample]) -> "Normalizer":
        if not samples:
            return cls()
        stack = np.stack([s.image for s in samples]).reshape(-1, 3).astype(np.float64)
        std = np.maximum(stack.std(axis=0), 1e-3)
        return cls(tuple(float(v) for v in stack.mean(axis=0)), tuple(float(v) for v in std))


def to_gray01(image: np.ndarray) -> np.ndarray:
    """Any 8/16-bit or float, gray or color image -> float32 gray in [0, 1]."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        img = image.astype(np.float32) / 255.0
    elif image.dtype == np.uint16:
        img = image.astype(np.float32) / 65535.0
    else:
        img = image.astype(np.float32)
    if img.ndim == 3:
        if img.shape[2] == 1:
            img = img[..., 0]
        elif img.shape[2] in (3, 4):
            # luminance with RGB channel order
            img = img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
        else:
            raise ValidationError(f"unsupported channel count {img.shape[2]}")
    elif img.ndim != 2:
        raise ValidationError(f"unsupported image shape {image.shape}")
    return np.clip(img, 0.0, 1.0)


def preprocess(image: np.ndarray, mask: np.ndarray, target: int = 512, meta: dict | None = None) -> ImageSample:
    """Grayscale, scale to [0, 1], replicate to 3 channels and resize to ``target``.

    Images are resized bilinearly and masks with nearest neighbour, so no new
    labels appear. Standardization happens later, inside the model.
    """
    mask = validate_mask(mask)
    if np.asarray(image).shape[:2] != mask.shape:
        raise ValidationError(f"image {np.asarray(image).shape[:2]} and mask {mask.shape} differ in size")
    gray = to_gray01(image)
    orig = gray.shape
    if orig != (target, target):
        gray = cv2.resize(gray, (target, target), interpolation=cv2.INTER_LINEAR)
        mask = cv2.resize(mask.astype(np.uint8), (target, target), interpolation=cv2.INTER_NEAREST)
    gray = np.clip(gray, 0.0, 1.0)
    img3 = np.repeat(gray[..., None], 3, axis=2).astype(np.float32)
    info = dict(meta or {})
    info["original_size"] = list(orig)
    return ImageSample(image=img3, mask=mask.astype(np.int64), meta=info)


@dataclass(frozen=True)
class AugmentPolicy:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_scale: float = 0.5
    scale_range: tuple[float, float] = (0.8, 1.2)
    p_grid: float = 0.5
    grid_steps: int = 5
    grid_limit: float = 0.3
    p_elastic: float = 0.5
    elastic_alpha: float = 0.03  # max displacement, fraction of image size
    elastic_sigma: float = 0.08  # smoothing, fraction of image size
    p_brightness_contrast: float = 0.5
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    p_shadow: float = 0.5
    shadow_dim: tuple[float, float] = (0.5, 0.85)
    p_clahe: float = 0.5
    clahe_clip: float = 4.0
    clahe_tiles: int = 8
    p_noise: float = 0.5
    noise_std: tuple[float, float] = (0.01, 0.05)

    def __post_init__(self):
        for name, val in vars(self).items():
            if name.startswith("p_") and not 0.0 <= val <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {val}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValidationError(f"invalid scale range {self.scale_range}")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(**{k: 0.0 for k in vars(cls()) if k.startswith("p_")})


def _remap(image, mask, map_x, map_y):
    img = cv2.remap(image, map_x, map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    msk = cv2.remap(mask, map_x, map_y, cv2.INTER_NEAREST, borderMode=cv2.BORDER_REPLICATE)
    return img, msk


def _scale(image, mask, s):
    h, w = mask.shape
    m = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), 0.0, s)
    img = cv2.warpAffine(image, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    msk = cv2.warpAffine(mask, m, (w, h), flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_REPLICATE)
    return img, msk


def _grid_maps(shape, rng, steps, limit):
    h, w = shape

    def axis(n):
        cell = n / steps
        stretch = 1.0 + rng.uniform(-limit, limit, steps)
        knots = np.concatenate([[0.0], np.cumsum(cell * stretch)])
        knots *= n / knots[-1]
        src = np.linspace(0, n, steps + 1)
        return np.interp(np.arange(n) + 0.5, src, knots) - 0.5

    xs, ys = axis(w), axis(h)
    map_x = np.broadcast_to(xs[None, :], (h, w)).astype(np.float32)
    map_y = np.broadcast_to(ys[:, None], (h, w)).astype(np.float32)
    return np.ascontiguousarray(map_x), np.ascontiguousarray(map_y)


def _elastic_maps(shape, rng, alpha, sigma):
    h, w = shape
    size = max(h, w)
    dx = cv2.GaussianBlur(rng.uniform(-1, 1, (h, w)).astype(np.float32), (0, 0), sigma * size)
    dy = cv2.GaussianBlur(rng.uniform(-1, 1, (h, w)).astype(np.float32), (0, 0), sigma * size)
    for d in (dx, dy):
        d *= alpha * size / (np.abs(d).max() + 1e-8)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    return xx + dx, yy + dy


def _shadow(image, rng, dim_range):
    h, w = image.shape[:2]
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    rx, ry = rng.uniform(0.15, 0.4) * w, rng.uniform(0.15, 0.4) * h
    angles = np.sort(rng.uniform(0, 2 * np.pi, 5))
    pts = np.stack([cx + rx * np.cos(angles), cy + ry * np.sin(angles)], 1).astype(np.int32)
    region = np.zeros((h, w), np.uint8)
    cv2.fillPoly(region, [pts], 1)
    factor = np.where(region[..., None] > 0, rng.uniform(*dim_range), 1.0).astype(np.float32)
    return image * factor


def _clahe(image, clip, tiles):
    op = cv2.createCLAHE(clipLimit=clip, tileGridSize=(tiles, tiles))
    u8 = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    out = np.stack([op.apply(np.ascontiguousarray(u8[..., c])) for c in range(u8.shape[2])], axis=2)
    return out.astype(np.float32) / 255.0


def augment(sample: ImageSample, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()) -> ImageSample:
    """Apply the training augmentation policy.

    Geometric transforms move image and mask together (mask by nearest
    neighbour); photometric ones touch only the image. CLAHE runs after the
    brightness/contrast and shadow steps. The names of applied transforms are
    recorded in ``meta["applied"]``.
    """
    image = np.array(sample.image, dtype=np.float32)
    mask = np.array(sample.mask, dtype=np.uint8)
    applied: list[str] = []
    h, w = mask.shape

    if rng.random() < policy.p_hflip:
        image, mask = image[:, ::-1], mask[:, ::-1]
        applied.append("hflip")
    if rng.random() < policy.p_vflip:
        image, mask = image[::-1], mask[::-1]
        applied.append("vflip")
    image, mask = np.ascontiguousarray(image), np.ascontiguousarray(mask)
    if rng.random() < policy.p_scale:
        image, mask = _scale(image, mask, rng.uniform(*policy.scale_range))
        applied.append("scale")
    if rng.random() < policy.p_grid:
        image, mask = _remap(image, mask, *_grid_maps((h, w), rng, policy.grid_steps, policy.grid_limit))
        applied.append("grid")
    if rng.random() < policy.p_elastic:
        image, mask = _remap(image, mask, *_elastic_maps((h, w), rng, policy.elastic_alpha, policy.elastic_sigma))
        applied.append("elastic")

    if rng.random() < policy.p_brightness_contrast:
        alpha = 1.0 + rng.uniform(-policy.contrast_limit, policy.contrast_limit)
        beta = rng.uniform(-policy.brightness_limit, policy.brightness_limit)
        image = np.clip(image * alpha + beta, 0, 1)
        applied.append("brightness_contrast")
    if rng.random() < policy.p_shadow:
        image = _shadow(image, rng, policy.shadow_dim)
        applied.append("shadow")
    if rng.random() < policy.p_clahe:
        image = _clahe(image, policy.clahe_clip, policy.clahe_tiles)
        applied.append("clahe")
    if rng.random() < policy.p_noise:
        image = image + rng.normal(0, rng.uniform(*policy.noise_std), image.shape).astype(np.float32)
        applied.append("noise")

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    meta = dict(sample.meta)
    meta["applied"] = applied
    return ImageSample(image=image, mask=mask.astype(np.int64), meta=meta)


def read_image(path: Path, flags=cv2.IMREAD_UNCHANGED) -> np.ndarray:
    if not Path(path).exists():
        raise FileNotFoundError(f"missing file: {path}")
    arr = cv2.imread(str(path), flags)
    if arr is None:
        raise OSError(f"unreadable image: {path}")
    if arr.ndim == 3 and arr.shape[2] >= 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_BGR2RGB if arr.shape[2] == 3 else cv2.COLOR_BGRA2RGB)
    return arr


def load_samples(manifest: DatasetManifest, split: str, target: int) -> list[ImageSample]:
    out = []
    for entry in manifest.split(split):
        img_path, mask_path = manifest.resolve(entry["image"]), manifest.resolve(entry["mask"])
        image = read_image(img_path)
        mask = read_image(mask_path, cv2.IMREAD_GRAYSCALE)
        meta = {"index": entry.get("index"), "profile": entry.get("profile"), "seed": entry.get("seed"),
                "image_path": str(img_path)}
        out.append(preprocess(image, mask.astype(np.int64), target, meta))
    return out


def num_batches(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def iterate_batches(samples: Sequence[ImageSample], batch_size: int, shuffle_seed: int | None = None,
                    epoch: int = 0, policy: AugmentPolicy | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (B x 3 x H x W float32 images, B x H x W int64 masks).

    Augmentation randomness depends only on (shuffle_seed, epoch, sample position).
    """
    if batch_size <= 0:
        raise ValueError("batch size must be positive")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        imgs, masks = [], []
        for idx in order[start:start + batch_size]:
            s = samples[idx]
            if policy is not None:
                seed = [0 if shuffle_seed is None else shuffle_seed, epoch, int(idx)]
                s = augment(s, np.random.default_rng(seed), policy)
            imgs.append(s.image.transpose(2, 0, 1))
            masks.append(s.mask)
        yield np.stack(imgs).astype(np.float32), np.stack(masks).astype(np.int64)


def load_split(manifest: DatasetManifest, split: str, batch_size: int, shuffle_seed: int | None = None,
               target: int = 512, policy: AugmentPolicy | None = None, epoch: int = 0):
    """Batch stream over one manifest split; only the train split is augmented."""
    samples = load_samples(manifest, split, target)
    return iterate_batches(samples, batch_size, shuffle_seed, epoch, policy if split == "train" else None)
