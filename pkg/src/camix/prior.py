"""Per-pixel class-frequency prior accumulated over source labels.

The prior encodes scene layout (sky at the top, road at the bottom) as a
(C, H, W) distribution and is multiplied elementwise into teacher
predictions before their argmax is taken.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import camx
from .ops import ShapeError
from .scenes import IGNORE_ID


@dataclass(frozen=True)
class SpatialPrior:
    q: np.ndarray  # (C, H, W), rows sum to 1 per pixel
    smoothing_eps: float
    source_count: int


def build_spatial_prior(
    labels: Sequence[np.ndarray], num_classes: int, smoothing_eps: float = 1.0
) -> SpatialPrior:
    """Count class frequencies per pixel with Laplace smoothing.

    q(c,h,w) = (count_c + eps) / (valid + C*eps); pixels with no valid
    observations and eps=0 fall back to the uniform distribution.
    """
    if len(labels) == 0:
        raise ValueError("need at least one label map")
    if smoothing_eps < 0:
        raise ValueError("smoothing_eps must be nonnegative")
    shape = labels[0].shape
    counts = np.zeros((num_classes,) + shape, dtype=np.float64)
    for lbl in labels:
        if lbl.shape != shape:
            raise ShapeError(f"mixed label shapes: {lbl.shape} vs {shape}")
        valid = lbl != IGNORE_ID
        for c in range(num_classes):
            counts[c] += (lbl == c) & valid
    valid_total = counts.sum(axis=0)
    denom = valid_total + num_classes * smoothing_eps
    if smoothing_eps == 0:
        q = np.where(denom > 0, (counts + 0.0) / np.maximum(denom, 1.0), 1.0 / num_classes)
    else:
        q = (counts + smoothing_eps) / denom
    return SpatialPrior(q=q, smoothing_eps=smoothing_eps, source_count=len(labels))


def uniform_prior(num_classes: int, height: int, width: int) -> SpatialPrior:
    """Flat prior; modulation with it never changes any argmax."""
    q = np.full((num_classes, height, width), 1.0 / num_classes)
    return SpatialPrior(q=q, smoothing_eps=0.0, source_count=0)


def modulate(teacher_probs: np.ndarray, prior: SpatialPrior) -> np.ndarray:
    """Elementwise q * probs. Deliberately not renormalized: consumers only
    take the per-pixel argmax, which is scale-invariant."""
    if teacher_probs.shape != prior.q.shape:
        raise ShapeError(f"probs {teacher_probs.shape} vs prior {prior.q.shape}")
    return teacher_probs * prior.q


def save_prior(prior: SpatialPrior, dir_path) -> None:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    camx.write_tensor(dir_path / "spatial_prior.camx", prior.q)
    sidecar = {
        "num_classes": prior.q.shape[0],
        "eps": prior.smoothing_eps,
        "source_count": prior.source_count,
    }
    (dir_path / "spatial_prior.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_prior(dir_path) -> SpatialPrior:
    dir_path = Path(dir_path)
    q = camx.read_tensor(dir_path / "spatial_prior.camx")
    sidecar = json.loads((dir_path / "spatial_prior.json").read_text())
    return SpatialPrior(q=q, smoothing_eps=sidecar["eps"], source_count=sidecar["source_count"])
