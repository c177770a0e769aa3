"""Loss reductions and their gradients w.r.t. predicted probabilities.

Three consistency modes share one backward path: each loss exposes a
probability-space gradient, which the trainer pulls through the softmax.
The segmentation loss is a mean (not a sum) over valid pixels so its scale
is independent of image size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import PROB_FLOOR, ShapeError, cross_entropy_map
from .scenes import IGNORE_ID


@dataclass(frozen=True)
class LossBreakdown:
    l_seg: float
    l_con: float
    lambda_con: float
    l_total: float
    valid_pixel_fraction: float
    # step diagnostics logged alongside the losses
    h_threshold: float = float("nan")
    u_fraction: float = float("nan")


def seg_loss(probs: np.ndarray, labels: np.ndarray, ignore_id: int = IGNORE_ID) -> float:
    """Mean per-pixel cross-entropy over non-ignore pixels; 0 if none valid."""
    ce, valid = cross_entropy_map(probs, labels, ignore_id)
    n = int(valid.sum())
    if n == 0:
        return 0.0
    return float(ce.sum() / n)


def seg_loss_grad(probs: np.ndarray, labels: np.ndarray, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """d seg_loss / d probs. Only the true-class channel of each valid,
    unclamped pixel is nonzero: -1/(N * p_true)."""
    return src_loss_grad(probs, labels, np.ones(labels.shape, dtype=np.uint8), ignore_id)


def src_loss(
    probs: np.ndarray, labels: np.ndarray, u_m: np.ndarray, ignore_id: int = IGNORE_ID
) -> float:
    """Significance-reweighted cross-entropy: sum(u * CE) / sum(u) over
    valid pixels; 0 when the mask de-weights everything."""
    if u_m.shape != labels.shape:
        raise ShapeError(f"u_m {u_m.shape} vs labels {labels.shape}")
    ce, valid = cross_entropy_map(probs, labels, ignore_id)
    w = u_m * valid
    denom = w.sum()
    if denom == 0:
        return 0.0
    return float((w * ce).sum() / denom)


def src_loss_grad(
    probs: np.ndarray, labels: np.ndarray, u_m: np.ndarray, ignore_id: int = IGNORE_ID
) -> np.ndarray:
    """d src_loss / d probs; zero at de-weighted, ignored, or floor-clamped pixels."""
    if u_m.shape != labels.shape:
        raise ShapeError(f"u_m {u_m.shape} vs labels {labels.shape}")
    valid = labels != ignore_id
    w = (u_m * valid).astype(np.float64)
    denom = w.sum()
    grad = np.zeros_like(probs, dtype=np.float64)
    if denom == 0:
        return grad
    safe_labels = np.where(valid, labels, 0).astype(np.int64)
    p_true = np.take_along_axis(probs, safe_labels[None], axis=0)[0]
    coeff = np.where(p_true > PROB_FLOOR, -(w / denom) / np.maximum(p_true, PROB_FLOOR), 0.0)
    np.put_along_axis(grad, safe_labels[None], coeff[None], axis=0)
    return grad


def mse_loss(probs: np.ndarray, labels: np.ndarray, ignore_id: int = IGNORE_ID) -> float:
    """Mean over valid pixels of the squared distance between the predicted
    distribution and the one-hot label (summed over channels)."""
    valid = labels != ignore_id
    n = int(valid.sum())
    if n == 0:
        return 0.0
    safe_labels = np.where(valid, labels, 0).astype(np.int64)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, safe_labels[None], 1.0, axis=0)
    sq = ((probs - onehot) ** 2).sum(axis=0)
    return float((sq * valid).sum() / n)


def mse_loss_grad(probs: np.ndarray, labels: np.ndarray, ignore_id: int = IGNORE_ID) -> np.ndarray:
    valid = labels != ignore_id
    n = int(valid.sum())
    grad = np.zeros_like(probs, dtype=np.float64)
    if n == 0:
        return grad
    safe_labels = np.where(valid, labels, 0).astype(np.int64)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, safe_labels[None], 1.0, axis=0)
    grad = 2.0 * (probs - onehot) * valid[None] / n
    return grad


def consistency_weight(t: int, lambda_max: float, t_ramp: int) -> float:
    """Gaussian ramp: lambda_max * exp(-5 * (1 - min(t/t_ramp, 1))^2)."""
    if t_ramp <= 0:
        raise ValueError("t_ramp must be positive")
    if t < 0:
        raise ValueError("t must be nonnegative")
    frac = min(t / t_ramp, 1.0)
    return lambda_max * math.exp(-5.0 * (1.0 - frac) ** 2)


def total_loss(l_seg: float, l_con: float, lambda_con: float) -> float:
    return l_seg + lambda_con * l_con
