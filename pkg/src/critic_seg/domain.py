"""Core value types plus the two pure algorithms the pipeline composes:
mask-based image merging and IoU scoring.

Images are float arrays in [0, 1] with shape (H, W, 3); masks are (H, W)
floats in [0, 1]. The production resolution is 64x64 but the operations are
shape-generic so tests can exercise the same code on small toys.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonBinaryMaskError, ShapeMismatchError

IMG_SIZE = 64
IMG_CHANNELS = 3
N_PIXELS = IMG_SIZE * IMG_SIZE


@dataclass
class Frame:
    """One observation: image, raw (pre-clipping) reward, optional truth mask."""

    image: np.ndarray
    reward: float = 0.0
    gt_mask: np.ndarray | None = None


@dataclass
class Episode:
    episode_id: str
    frames: list = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    def rewards(self) -> np.ndarray:
        return np.array([f.reward for f in self.frames], dtype=np.float64)


@dataclass
class LabeledFrame:
    """Frame paired with its discounted-reward label in [0, 1]."""

    image: np.ndarray
    label: float
    gt_mask: np.ndarray | None = None


@dataclass
class IoUScore:
    value: float
    intersection_px: int
    union_px: int


def validate_image(img: np.ndarray, size: int = IMG_SIZE) -> None:
    if img.shape != (size, size, IMG_CHANNELS):
        raise ShapeMismatchError(f"expected image shape {(size, size, IMG_CHANNELS)}, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ShapeMismatchError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ShapeMismatchError("image values outside [0, 1]")


def validate_mask(m: np.ndarray, size: int = IMG_SIZE) -> None:
    if m.shape != (size, size):
        raise ShapeMismatchError(f"expected mask shape {(size, size)}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeMismatchError("mask contains non-finite values")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ShapeMismatchError("mask values outside [0, 1]")


def merge(a: np.ndarray, b: np.ndarray, m: np.ndarray):
    """Swap masked content between two images.

    Returns (x, y) with x = (1-m)*a + m*b and y = (1-m)*b + m*a, the mask
    broadcast over channels. Pixel sums are conserved: x + y == a + b.
    """
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if m.shape != a.shape[:2]:
        raise ShapeMismatchError(f"mask shape {m.shape} does not match image {a.shape}")
    mc = m[..., None]
    x = (1.0 - mc) * a + mc * b
    y = (1.0 - mc) * b + mc * a
    return x, y


def binarize(m: np.ndarray, threshold: float) -> np.ndarray:
    return (m > threshold).astype(np.uint8)


def iou(pred: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> IoUScore:
    """IoU between a soft predicted mask (binarized at threshold) and a binary truth.

    When both masks are empty the score is defined as 1.0: both agree there is
    nothing to segment, which matters for object-free frames.
    """
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    tvals = np.unique(truth)
    if not np.all(np.isin(tvals, (0, 1))):
        raise NonBinaryMaskError(f"truth mask is not binary; values {tvals[:8]}")
    p = pred > threshold
    t = truth.astype(bool)
    inter = int(np.count_nonzero(p & t))
    union = int(np.count_nonzero(p | t))
    value = 1.0 if union == 0 else inter / union
    return IoUScore(value=value, intersection_px=inter, union_px=union)
