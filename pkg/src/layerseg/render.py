"""Human-viewable renderings: palette masks, overlays, uncertainty heatmaps, error maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_types import TAXONOMY

BLUE = np.array([0, 0, 255], dtype=np.float64)
WHITE = np.array([255, 255, 255], dtype=np.float64)
RED = np.array([255, 0, 0], dtype=np.float64)
# viridis end points
CORRECT_COLOR = (68, 1, 84)
ERROR_COLOR = (253, 231, 37)


@dataclass(frozen=True)
class RenderSpec:
    palette: np.ndarray = TAXONOMY.palette()
    overlay_alpha: float = 0.45


def colorize_labels(mask: np.ndarray, spec: RenderSpec = RenderSpec()) -> np.ndarray:
    return spec.palette[np.asarray(mask)]


def overlay(image: np.ndarray, mask: np.ndarray, spec: RenderSpec = RenderSpec()) -> np.ndarray:
    """Blend the class palette over an H x W x 3 image in [0, 1]; returns uint8 RGB."""
    base = np.asarray(image, dtype=np.float64) * 255.0
    if base.ndim == 2:
        base = np.repeat(base[..., None], 3, axis=2)
    out = (1 - spec.overlay_alpha) * base + spec.overlay_alpha * colorize_labels(mask, spec)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def diverging_colormap(values: np.ndarray) -> np.ndarray:
    """Map [-1, 1] linearly to blue -> white -> red (fixed range, not per-image)."""
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)[..., None]
    low = WHITE + (BLUE - WHITE) * (-v)
    high = WHITE + (RED - WHITE) * v
    return np.round(np.where(v < 0, low, high)).astype(np.uint8)


def uncertainty_heatmap(soft_labels: np.ndarray) -> np.ndarray:
    """Heatmap of uncertainty (negated soft labels): red = uncertain, blue = confident."""
    return diverging_colormap(-np.asarray(soft_labels))


def error_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    wrong = np.asarray(pred) != np.asarray(gt)
    return np.where(wrong[..., None], np.array(ERROR_COLOR), np.array(CORRECT_COLOR)).astype(np.uint8)
