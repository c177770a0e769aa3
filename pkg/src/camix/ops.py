"""Dense-array kernels: softmax, same-padded convolution, cross-entropy.

Arrays follow channel-major (C, H, W) layout in C (row-major) order.
Convolution gradients are derived by hand and checked against central
finite differences in the test suite; there is no autograd tape.
"""

from __future__ import annotations

import numpy as np

from .rng import SeededRng

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Array rank or dimensions incompatible with the operation."""


class DataError(ValueError):
    """Array values outside the operation's domain (bad labels, negatives)."""


def as_tensor(data, dtype=np.float64, checked: bool = True) -> np.ndarray:
    """Coerce to a C-contiguous float array, rejecting NaN/Inf when checked."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if checked and not np.all(np.isfinite(arr)):
        raise DataError("non-finite values in tensor")
    return arr


def softmax_channelwise(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the channel axis of a (C, H, W) array.

    Max-subtraction keeps the exponentials in range for any finite input.
    """
    logits = np.asarray(logits)
    if logits.ndim != 3:
        raise ShapeError(f"expected (C, H, W) logits, got shape {logits.shape}")
    if logits.shape[0] < 2:
        raise ShapeError("need at least 2 channels")
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits.

    dz_c = p_c * (g_c - sum_k g_k p_k), applied per pixel.
    """
    if probs.shape != grad_probs.shape:
        raise ShapeError("probs/grad shape mismatch")
    inner = np.sum(grad_probs * probs, axis=0, keepdims=True)
    return probs * (grad_probs - inner)


def _check_conv_shapes(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> None:
    if x.ndim != 3:
        raise ShapeError(f"input must be (Cin, H, W), got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be (Cout, Cin, k, k), got {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
    if cin != x.shape[0]:
        raise ShapeError(f"channel mismatch: input {x.shape[0]} vs kernel {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias must be ({cout},), got {bias.shape}")


def _shift_stack(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-pad and unfold (Cin, H, W) into (Cin*k*k, H*W) shifted planes.

    Row i*k*k + dy*k + dx holds channel i shifted by the kernel tap
    (dy, dx), matching the flattening of a (Cout, Cin, k, k) kernel.
    """
    cin, h, w = x.shape
    if k == 1:
        return x.reshape(cin, h * w)
    p = k // 2
    padded = np.zeros((cin, h + 2 * p, w + 2 * p), dtype=x.dtype)
    padded[:, p : p + h, p : p + w] = x
    stack = np.empty((cin, k * k, h * w), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            stack[:, dy * k + dx] = padded[:, dy : dy + h, dx : dx + w].reshape(cin, h * w)
    return stack.reshape(cin * k * k, h * w)


def conv2d_forward(
    x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, _stack: np.ndarray | None = None
) -> np.ndarray:
    """Same-padded stride-1 convolution, (Cin, H, W) -> (Cout, H, W)."""
    _check_conv_shapes(x, kernel, bias)
    cout, cin, k, _ = kernel.shape
    _, h, w = x.shape
    stack = _shift_stack(x, k) if _stack is None else _stack
    out = kernel.reshape(cout, cin * k * k) @ stack
    out += bias[:, None]
    return out.reshape(cout, h, w)


def conv2d_backward(
    x: np.ndarray,
    kernel: np.ndarray,
    grad_out: np.ndarray,
    _stack: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. input, kernel, and bias.

    grad_input is the same-padded correlation of grad_out with the spatially
    flipped kernel, channels transposed; grad_kernel correlates the padded
    input with grad_out.
    """
    cout, cin, k, _ = kernel.shape
    if x.ndim != 3 or x.shape[0] != cin:
        raise ShapeError(f"input shape {x.shape} inconsistent with kernel {kernel.shape}")
    if grad_out.shape != (cout,) + x.shape[1:]:
        raise ShapeError(f"grad_out shape {grad_out.shape} inconsistent")
    h, w = x.shape[1:]

    grad_bias = grad_out.sum(axis=(1, 2))

    stack = _shift_stack(x, k) if _stack is None else _stack
    grad_kernel = (grad_out.reshape(cout, h * w) @ stack.T).reshape(cout, cin, k, k)

    flipped = np.ascontiguousarray(np.flip(kernel, axis=(2, 3)).transpose(1, 0, 2, 3))
    zero_bias = np.zeros(cin, dtype=grad_out.dtype)
    grad_input = conv2d_forward(grad_out, flipped, zero_bias)
    return grad_input, grad_kernel, grad_bias


def gaussian_noise(t: np.ndarray, sigma: float, rng: SeededRng) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise; sigma=0 returns the input unchanged."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    t = np.asarray(t)
    if sigma == 0:
        return t.copy()
    eps = rng.standard_normal(t.shape, dtype=t.dtype if t.dtype == np.float32 else np.float64)
    return t + sigma * eps


def cross_entropy_map(
    probs: np.ndarray, labels: np.ndarray, ignore_id: int = 255
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel -log p(true class), plus the mask of pixels that count.

    Probabilities are floored at PROB_FLOOR before the log. Pixels labeled
    ``ignore_id`` contribute 0 and are flagged excluded in the returned mask.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.ndim != 3 or labels.shape != probs.shape[1:]:
        raise ShapeError(f"probs {probs.shape} / labels {labels.shape} mismatch")
    c = probs.shape[0]
    valid = labels != ignore_id
    if np.any(valid & (labels >= c)):
        raise DataError(f"label id >= {c} outside ignore={ignore_id}")
    safe_labels = np.where(valid, labels, 0).astype(np.int64)
    p_true = np.take_along_axis(probs, safe_labels[None], axis=0)[0]
    ce = np.where(valid, -np.log(np.maximum(p_true, PROB_FLOOR)), 0.0)
    return ce, valid
