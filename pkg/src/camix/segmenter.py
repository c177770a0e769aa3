"""Student/teacher fully-convolutional per-pixel classifier.

Fixed architecture: three same-padded 3x3 conv + ReLU stages (3->16->16->16)
followed by a 1x1 conv producing C logits at input resolution. Gradients are
hand-written layer by layer; the teacher is an exponential moving average of
the student and never sees a gradient.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import camx, ops
from .ops import ShapeError, conv2d_backward, conv2d_forward
from .rng import SeededRng

HIDDEN_CHANNELS = 16


def _layer_shapes(num_classes: int, hidden: int = HIDDEN_CHANNELS):
    return [
        (hidden, 3, 3),
        (hidden, hidden, 3),
        (hidden, hidden, 3),
        (num_classes, hidden, 1),
    ]


@dataclass
class SegmenterParams:
    kernels: list[np.ndarray]
    biases: list[np.ndarray]
    num_classes: int

    @property
    def dtype(self):
        return self.kernels[0].dtype

    def tensors(self):
        """All parameter arrays, kernels then biases, in layer order."""
        return list(self.kernels) + list(self.biases)

    def copy(self) -> "SegmenterParams":
        return SegmenterParams(
            kernels=[k.copy() for k in self.kernels],
            biases=[b.copy() for b in self.biases],
            num_classes=self.num_classes,
        )


@dataclass
class SegmenterGrads:
    kernels: list[np.ndarray]
    biases: list[np.ndarray]

    def tensors(self):
        return list(self.kernels) + list(self.biases)


def init_segmenter(num_classes: int, rng: SeededRng, dtype=np.float32) -> SegmenterParams:
    """Uniform init in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    kernels, biases = [], []
    for cout, cin, k in _layer_shapes(num_classes):
        fan_in = cin * k * k
        fan_out = cout * k * k
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        kernels.append(rng.uniform(-limit, limit, (cout, cin, k, k)).astype(dtype))
        biases.append(np.zeros(cout, dtype=dtype))
    return SegmenterParams(kernels=kernels, biases=biases, num_classes=num_classes)


def forward(params: SegmenterParams, image: np.ndarray) -> np.ndarray:
    """(3, H, W) image -> (C, H, W) logits."""
    logits, _ = forward_with_cache(params, image)
    return logits


def forward_with_cache(params: SegmenterParams, image: np.ndarray):
    """Forward pass keeping each layer's input, unfolded input, and
    pre-activation for the backward pass."""
    if image.ndim != 3 or image.shape[0] != params.kernels[0].shape[1]:
        raise ShapeError(f"expected (3, H, W) image, got {image.shape}")
    x = image.astype(params.dtype, copy=False)
    inputs, stacks, preacts = [], [], []
    n_layers = len(params.kernels)
    for i, (kern, bias) in enumerate(zip(params.kernels, params.biases)):
        inputs.append(x)
        stack = ops._shift_stack(x, kern.shape[2])
        stacks.append(stack)
        z = conv2d_forward(x, kern, bias, _stack=stack)
        preacts.append(z)
        x = np.maximum(z, 0) if i < n_layers - 1 else z
    return x, (inputs, stacks, preacts)


def backward_from_cache(params: SegmenterParams, cache, grad_logits: np.ndarray) -> SegmenterGrads:
    inputs, stacks, preacts = cache
    n_layers = len(params.kernels)
    gk = [None] * n_layers
    gb = [None] * n_layers
    g = grad_logits.astype(params.dtype, copy=False)
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g = g * (preacts[i] > 0)
        g, gk[i], gb[i] = conv2d_backward(inputs[i], params.kernels[i], g, _stack=stacks[i])
    return SegmenterGrads(kernels=gk, biases=gb)


def backward(params: SegmenterParams, image: np.ndarray, grad_logits: np.ndarray) -> SegmenterGrads:
    """Reverse-mode gradients of forward() composed with a loss-side gradient."""
    logits, cache = forward_with_cache(params, image)
    if grad_logits.shape != logits.shape:
        raise ShapeError(f"grad_logits {grad_logits.shape} vs logits {logits.shape}")
    return backward_from_cache(params, cache, grad_logits)


def forward_batch(params: SegmenterParams, images: np.ndarray) -> np.ndarray:
    """(B, 3, H, W) -> (B, C, H, W) logits via one GEMM chain per layer.

    Activations stay in pixels-first (B*H*W, C) layout between layers; that
    keeps the GEMMs in their fast tall-and-skinny orientation on one core.
    Used for throughput on the teacher's stochastic passes; per-image
    forward() stays the reference path.
    """
    if images.ndim != 4 or images.shape[1] != params.kernels[0].shape[1]:
        raise ShapeError(f"expected (B, 3, H, W) images, got {images.shape}")
    b, _, h, w = images.shape
    x = np.ascontiguousarray(images.transpose(0, 2, 3, 1), dtype=params.dtype)  # NHWC
    n_layers = len(params.kernels)
    for i, (kern, bias) in enumerate(zip(params.kernels, params.biases)):
        cout, cin, k, _ = kern.shape
        if k == 1:
            z = x.reshape(b * h * w, cin) @ kern.reshape(cout, cin).T
        else:
            p = k // 2
            padded = np.zeros((b, h + 2 * p, w + 2 * p, cin), dtype=x.dtype)
            padded[:, p : p + h, p : p + w, :] = x
            stack = np.empty((b * h * w, k * k * cin), dtype=x.dtype)
            for dy in range(k):
                for dx in range(k):
                    d = dy * k + dx
                    shifted = padded[:, dy : dy + h, dx : dx + w, :]
                    stack[:, d * cin : (d + 1) * cin] = shifted.reshape(b * h * w, cin)
            # columns ordered (tap, channel); match with a transposed kernel
            k2 = kern.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)
            z = stack @ k2
        z += bias[None, :]
        if i < n_layers - 1:
            z = np.maximum(z, 0)
        x = z.reshape(b, h, w, -1)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


@dataclass
class StudentTeacher:
    student: SegmenterParams
    teacher: SegmenterParams
    alpha: float = 0.99

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")


def ema_update(st: StudentTeacher) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, elementwise."""
    a = st.alpha
    for tgt, src in zip(st.teacher.tensors(), st.student.tensors()):
        tgt *= a
        tgt += (1.0 - a) * src


def params_hash(params: SegmenterParams) -> str:
    h = hashlib.sha256()
    for t in params.tensors():
        h.update(t.tobytes())
    return h.hexdigest()


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: SegmenterParams) -> "AdamState":
        return cls(
            m=[np.zeros_like(t, dtype=np.float64) for t in params.tensors()],
            v=[np.zeros_like(t, dtype=np.float64) for t in params.tensors()],
        )


def adam_step(
    params: SegmenterParams,
    grads: SegmenterGrads,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with classic L2 decay folded into the gradient."""
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params.tensors(), grads.tensors(), state.m, state.v):
        g = g.astype(np.float64) + weight_decay * p.astype(np.float64)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


def poly_lr(base_lr: float, t: int, t_max: int, power: float = 0.9) -> float:
    """Polynomial decay from base_lr to 0 over t_max steps."""
    return base_lr * (1.0 - min(t, t_max) / t_max) ** power


def save_checkpoint(dir_path, st: StudentTeacher, opt: AdamState, t: int) -> None:
    """One CAMX file per tensor plus checkpoint.json describing them."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)

    def dump(prefix: str, arrays) -> list[str]:
        names = []
        for i, arr in enumerate(arrays):
            name = f"{prefix}_{i}.camx"
            camx.write_tensor(dir_path / name, arr)
            names.append(name)
        return names

    meta = {
        "arch": {"num_classes": st.student.num_classes, "hidden": HIDDEN_CHANNELS},
        "alpha": st.alpha,
        "t": t,
        "dtype": str(np.dtype(st.student.dtype)),
        "student_kernels": dump("student_kernel", st.student.kernels),
        "student_biases": dump("student_bias", st.student.biases),
        "teacher_kernels": dump("teacher_kernel", st.teacher.kernels),
        "teacher_biases": dump("teacher_bias", st.teacher.biases),
        "adam_m": dump("adam_m", opt.m),
        "adam_v": dump("adam_v", opt.v),
        "adam_step": opt.step,
    }
    (dir_path / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(dir_path) -> tuple[StudentTeacher, AdamState, int]:
    dir_path = Path(dir_path)
    meta = json.loads((dir_path / "checkpoint.json").read_text())
    dtype = np.dtype(meta["dtype"])

    def load(names, cast=None):
        return [camx.read_tensor(dir_path / n).astype(cast or dtype) for n in names]

    student = SegmenterParams(
        kernels=load(meta["student_kernels"]),
        biases=load(meta["student_biases"]),
        num_classes=meta["arch"]["num_classes"],
    )
    teacher = SegmenterParams(
        kernels=load(meta["teacher_kernels"]),
        biases=load(meta["teacher_biases"]),
        num_classes=meta["arch"]["num_classes"],
    )
    st = StudentTeacher(student=student, teacher=teacher, alpha=meta["alpha"])
    opt = AdamState(m=load(meta["adam_m"], np.float64), v=load(meta["adam_v"], np.float64), step=meta["adam_step"])
    return st, opt, meta["t"]
