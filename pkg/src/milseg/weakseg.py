"""Weak segmentation from the last decoder activation.

Pipeline: channel mean -> min-max normalisation -> threshold -> morphological
opening with a rectangular element -> keep the largest 4-connected component.

Border convention: erosion treats pixels outside the image as False, dilation
ignores them. With that convention ``erode(S, z) == ~dilate(~S, z.reflected(),
border_value=True)`` holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

DEFAULT_TAU = 0.5
FULL_SIZE_ELEMENT = 20
FULL_SIZE_IMAGE = 250


@dataclass(frozen=True)
class StructuringElement:
    """All-true ``height x width`` rectangle anchored at ``(anchor_row, anchor_col)``.

    The anchor defaults to ``(height // 2, width // 2)``; for odd sizes that is
    the centre and the element equals its reflection.
    """

    height: int
    width: int
    anchor_row: Optional[int] = None
    anchor_col: Optional[int] = None

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigurationError("structuring element sides must be positive")
        if self.anchor_row is None:
            object.__setattr__(self, "anchor_row", self.height // 2)
        if self.anchor_col is None:
            object.__setattr__(self, "anchor_col", self.width // 2)
        if not (0 <= self.anchor_row < self.height and 0 <= self.anchor_col < self.width):
            raise ConfigurationError("anchor must lie inside the element")

    @classmethod
    def square(cls, side: int) -> "StructuringElement":
        return cls(side, side)

    @classmethod
    def for_image(cls, image_size: int) -> "StructuringElement":
        """20x20 at 250 pixels, scaled proportionally (5x5 at 64)."""
        side = max(1, round(FULL_SIZE_ELEMENT * image_size / FULL_SIZE_IMAGE))
        return cls.square(side)

    def reflected(self) -> "StructuringElement":
        return StructuringElement(
            self.height, self.width, self.height - 1 - self.anchor_row, self.width - 1 - self.anchor_col
        )


def _window_sum(mask: np.ndarray, h: int, w: int, pad: tuple[int, int, int, int], border_value: bool) -> np.ndarray:
    """Sum of ``mask`` over every h x w window after padding (top, bottom, left, right)."""
    top, bottom, left, right = pad
    padded = np.pad(mask.astype(np.int64), ((top, bottom), (left, right)), constant_values=int(border_value))
    integral = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), np.int64)
    integral[1:, 1:] = padded.cumsum(0).cumsum(1)
    rows, cols = mask.shape
    return (
        integral[h : h + rows, w : w + cols]
        - integral[:rows, w : w + cols]
        - integral[h : h + rows, :cols]
        + integral[:rows, :cols]
    )


def _check(mask: np.ndarray, z: StructuringElement) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got shape {mask.shape}")
    if z.height > mask.shape[0] or z.width > mask.shape[1]:
        raise ConfigurationError(f"structuring element {z.height}x{z.width} exceeds mask {mask.shape}")
    return mask


def erode(mask: np.ndarray, z: StructuringElement, border_value: bool = False) -> np.ndarray:
    """True where every pixel of ``z`` placed at that point is True."""
    mask = _check(mask, z)
    pad = (z.anchor_row, z.height - 1 - z.anchor_row, z.anchor_col, z.width - 1 - z.anchor_col)
    return _window_sum(mask, z.height, z.width, pad, border_value) == z.height * z.width


def dilate(mask: np.ndarray, z: StructuringElement, border_value: bool = False) -> np.ndarray:
    """True where the reflected ``z`` placed at that point hits a True pixel."""
    mask = _check(mask, z)
    pad = (z.height - 1 - z.anchor_row, z.anchor_row, z.width - 1 - z.anchor_col, z.anchor_col)
    return _window_sum(mask, z.height, z.width, pad, border_value) > 0


def opening(mask: np.ndarray, z: StructuringElement) -> np.ndarray:
    return dilate(erode(mask, z), z)


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep the biggest 4-connected component; ties go to the one whose first pixel comes first in row-major order."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask)
    if count == 0:
        return np.zeros_like(mask)
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=count + 1)
    ids, first = np.unique(flat, return_index=True)
    anchor = np.full(count + 1, flat.size, dtype=np.int64)
    anchor[ids] = first
    candidates = np.arange(1, count + 1)
    best = min(candidates, key=lambda c: (-sizes[c], anchor[c]))
    return labels == best


def activation_map(last_activation, image_index: int = 0) -> np.ndarray:
    """Channel mean of one image's activation, min-max scaled to [0, 1]; constant maps give zeros."""
    act = last_activation.data if isinstance(last_activation, Tensor) else np.asarray(last_activation)
    if act.ndim != 4:
        raise DimensionError(f"expected a 4-D activation, got shape {act.shape}")
    mean = act[image_index].astype(np.float64).mean(axis=0)
    lo, hi = mean.min(), mean.max()
    if hi - lo <= 0:
        return np.zeros_like(mean)
    return (mean - lo) / (hi - lo)


def threshold(values: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    return np.asarray(values) >= tau


def postprocess(heat: np.ndarray, tau: float, z: StructuringElement) -> np.ndarray:
    return largest_component(opening(threshold(heat, tau), z))


def segment(net, image: np.ndarray, tau: float = DEFAULT_TAU, z: Optional[StructuringElement] = None):
    """Return ``(heatmap, mask)`` for a single H x W image under inference mode."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {image.shape}")
    if z is None:
        z = StructuringElement.for_image(image.shape[0])
    _, last = net.forward(image[None, None].astype(net.dtype), training=False)
    heat = activation_map(last, 0)
    return heat, postprocess(heat, tau, z)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
