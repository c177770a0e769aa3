"""Masked hard compositions in the target-to-source direction.

Each output pixel is an exact copy of one input's pixel: target content
where the mask is 1, source content where it is 0. No blending.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .context import ContextualMask
from .ops import ShapeError


@dataclass(frozen=True)
class MixedBatch:
    x_m: np.ndarray  # (3, H, W) mixed image
    y_m: np.ndarray  # (H, W) mixed labels
    u_m: np.ndarray  # (H, W) mixed significance mask
    mask: ContextualMask


def _mask_array(m) -> np.ndarray:
    arr = m.m if isinstance(m, ContextualMask) else np.asarray(m)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask must be binary")
    return arr


def mix_images(x_s: np.ndarray, x_t: np.ndarray, m) -> np.ndarray:
    """Target pixel where m=1, source pixel where m=0; mask broadcasts over channels."""
    arr = _mask_array(m)
    if x_s.shape != x_t.shape or x_s.shape[-2:] != arr.shape:
        raise ShapeError(f"shape mismatch: {x_s.shape}, {x_t.shape}, mask {arr.shape}")
    return np.where(arr.astype(bool)[None], x_t, x_s)


def mix_labels(y_s: np.ndarray, y_t_hat: np.ndarray, m) -> np.ndarray:
    """Target pseudo-label where m=1, source ground truth where m=0.
    Ignore ids pass through whichever side is selected."""
    arr = _mask_array(m)
    if y_s.shape != y_t_hat.shape or y_s.shape != arr.shape:
        raise ShapeError(f"shape mismatch: {y_s.shape}, {y_t_hat.shape}, mask {arr.shape}")
    return np.where(arr.astype(bool), y_t_hat, y_s)


def mix_significance(u_t: np.ndarray, m) -> np.ndarray:
    """Target significance where m=1, constant 1 where m=0: source labels
    carry no uncertainty, so their pixels are always credible."""
    arr = _mask_array(m)
    if u_t.shape != arr.shape:
        raise ShapeError(f"shape mismatch: {u_t.shape}, mask {arr.shape}")
    return np.where(arr.astype(bool), u_t, np.uint8(1)).astype(np.uint8)
