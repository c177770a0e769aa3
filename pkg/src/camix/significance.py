"""Pixel credibility from predictive entropy under input noise.

The teacher runs n stochastic forward passes over noisy copies of the
target image; the entropy of the averaged prediction is compared against
a threshold that relaxes over training. Pixels below the threshold are
credible (mask value 1). No dropout is involved anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import DataError, gaussian_noise, softmax_channelwise
from .rng import SeededRng
from .segmenter import SegmenterParams, forward, forward_batch


@dataclass(frozen=True)
class ThresholdParams:
    beta: float
    gamma: float
    t: int
    t_max: int

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError("beta must be in (0, 1]")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if not 0 <= self.t <= self.t_max:
            raise ValueError("t must be in [0, t_max]")


def stochastic_mean_probs(
    teacher: SegmenterParams, x_t: np.ndarray, n: int, sigma: float, rng: SeededRng
) -> np.ndarray:
    """Mean softmax over n noisy copies; copy i draws from rng.child(i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    acc = None
    for i in range(n):
        noisy = gaussian_noise(x_t, sigma, rng.child(i))
        p = softmax_channelwise(forward(teacher, noisy))
        acc = p if acc is None else acc + p
    return acc / n


def clean_and_mean_probs(
    teacher: SegmenterParams, x_t: np.ndarray, n: int, sigma: float, rng: SeededRng
) -> tuple[np.ndarray, np.ndarray]:
    """Throughput variant: the clean pass and the n noisy copies run as one
    batched forward. Noise streams and the accumulation order match
    stochastic_mean_probs exactly."""
    if n < 1:
        raise ValueError("n must be >= 1")
    batch = np.stack([x_t] + [gaussian_noise(x_t, sigma, rng.child(i)) for i in range(n)])
    logits = forward_batch(teacher, batch)
    probs = [softmax_channelwise(logits[i]) for i in range(n + 1)]
    acc = probs[1]
    for i in range(2, n + 1):
        acc = acc + probs[i]
    return probs[0], acc / n


def predictive_entropy(p_hat: np.ndarray) -> np.ndarray:
    """Per-pixel Shannon entropy in nats; 0*log(0) contributes 0."""
    p_hat = np.asarray(p_hat)
    if np.any(p_hat < 0):
        raise DataError("negative probabilities")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p_hat > 0, p_hat * np.log(p_hat), 0.0)
    return -terms.sum(axis=0)


def dynamic_threshold(zeta: np.ndarray, params: ThresholdParams) -> float:
    """h = beta + (1-beta) * exp(gamma * (1 - t/t_max)^2) * k_sup, where
    k_sup is the largest entropy observed in this image's map."""
    if zeta.size == 0:
        raise ValueError("empty entropy map")
    k_sup = float(zeta.max())
    frac = 1.0 - params.t / params.t_max
    return params.beta + (1.0 - params.beta) * math.exp(params.gamma * frac * frac) * k_sup


def significance_mask(zeta: np.ndarray, h: float) -> np.ndarray:
    """1 where entropy is strictly below the threshold, else 0."""
    if not math.isfinite(h):
        raise ValueError("threshold must be finite")
    return (zeta < h).astype(np.uint8)
