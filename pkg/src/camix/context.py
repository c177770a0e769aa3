"""Contextual mask generation: which target classes get pasted where.

Pipeline: modulate teacher probabilities with the spatial prior, take the
per-pixel argmax as the spatially-modulated pseudo-label, randomly pick
half of the classes present, close the pick under the meta-class groups,
then rasterize membership into a binary mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import ShapeError
from .prior import SpatialPrior, modulate
from .rng import SeededRng
from .scenes import IGNORE_ID, MetaClassList


@dataclass(frozen=True)
class ContextualMask:
    m: np.ndarray  # (H, W) uint8 in {0, 1}
    selected_classes: frozenset[int]


def spatially_modulated_pseudolabel(teacher_probs: np.ndarray, prior: SpatialPrior) -> np.ndarray:
    """Per-pixel argmax of prior-modulated probabilities, ties to the
    smallest class id (argmax picks the first maximum)."""
    return np.argmax(modulate(teacher_probs, prior), axis=0).astype(np.uint8)


def select_classes(present: set[int], meta: MetaClassList, rng: SeededRng) -> frozenset[int]:
    """Pick ceil(|present|/2) classes uniformly without replacement, then
    append every group-mate of a picked class that is also present."""
    if not present:
        return frozenset()
    ordered = np.array(sorted(present), dtype=np.int64)
    k = math.ceil(len(ordered) / 2)
    picked = rng.choice(ordered, size=k, replace=False)
    chosen = set(int(c) for c in picked)
    for cls in picked:
        group = meta.group_of(int(cls))
        if group is not None:
            chosen |= group & present
    return frozenset(chosen)


def mask_from_selection(pseudolabel: np.ndarray, selected, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Rasterize membership of the pseudo-label in the selected set.

    Ignore-valued pixels (possible only in hand-built fixtures) map to 0,
    keeping source content there.
    """
    m = np.isin(pseudolabel, list(selected)) & (pseudolabel != ignore_id)
    return m.astype(np.uint8)


def generate_contextual_mask(
    teacher_probs: np.ndarray,
    prior: SpatialPrior,
    meta: MetaClassList,
    rng: SeededRng,
) -> tuple[ContextualMask, np.ndarray]:
    """Full mask generation; also returns the pseudo-label it was cut from."""
    if teacher_probs.ndim != 3:
        raise ShapeError(f"expected (C, H, W) probs, got {teacher_probs.shape}")
    pseudo = spatially_modulated_pseudolabel(teacher_probs, prior)
    present = set(int(c) for c in np.unique(pseudo))
    selected = select_classes(present, meta, rng)
    m = mask_from_selection(pseudo, selected)
    return ContextualMask(m=m, selected_classes=selected), pseudo
