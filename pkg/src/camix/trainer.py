"""End-to-end adaptation loop: sampling, the mixup step, optimization,
evaluation, and metrics persistence.

Per iteration (one source image + one target image):

1. clean teacher pass on the target image -> hard pseudo-label
2. contextual mask from prior-modulated teacher probabilities
3. input-level mix, student passes on the source and mixed images
4. output-level mix of labels, significance mask from noisy teacher passes,
   significance-level mix
5. segmentation + reweighted consistency losses, one Adam step on the
   student, then the teacher EMA update

`method=source_only` skips the consistency term entirely;
`method=classmix` swaps in a uniform prior, an empty meta list, and an
all-ones mixed significance mask, leaving every other code path identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import camx
from .context import generate_contextual_mask
from .losses import (
    LossBreakdown,
    consistency_weight,
    mse_loss,
    mse_loss_grad,
    seg_loss,
    seg_loss_grad,
    src_loss,
    src_loss_grad,
    total_loss,
)
from .mixing import MixedBatch, mix_images, mix_labels, mix_significance
from .ops import softmax_backward, softmax_channelwise
from .prior import SpatialPrior, build_spatial_prior, uniform_prior
from .rng import SeededRng
from .scenes import IGNORE_ID, Dataset, MetaClassList, load_dataset
from .segmenter import (
    AdamState,
    SegmenterGrads,
    StudentTeacher,
    adam_step,
    backward_from_cache,
    ema_update,
    forward,
    forward_with_cache,
    init_segmenter,
    poly_lr,
    save_checkpoint,
)
from .significance import (
    ThresholdParams,
    clean_and_mean_probs,
    dynamic_threshold,
    predictive_entropy,
    significance_mask,
)

METHODS = ("source_only", "classmix", "camix")
CONSISTENCY_LOSSES = ("src", "ce", "mse")

# child-stream ids off the per-run root rng
_STREAM_INIT = 0
_STREAM_DATA = 1
_STREAM_STEPS = 2


class TrainingDiverged(RuntimeError):
    """Raised when the total loss turns NaN; carries the postmortem dump dir."""

    def __init__(self, t: int, dump_dir: str):
        super().__init__(f"NaN loss at step {t}; offending batch dumped to {dump_dir}")
        self.dump_dir = dump_dir


@dataclass
class TrainConfig:
    """Every knob of a run. JSON keys match field names one to one."""

    source_train: str = ""  # labeled source dataset dir
    target_train: str = ""  # unlabeled target dataset dir
    target_eval: str = ""  # labeled target dataset dir for mIoU
    source_eval: str = ""  # optional labeled source dataset dir
    method: str = "camix"  # source_only | classmix | camix
    consistency_loss: str = "src"  # src | ce | mse
    num_classes: int = 8
    t_max: int = 3000
    seed: int = 0
    n_copies: int = 8  # stochastic teacher passes per step
    sigma: float = 0.1  # input noise scale for those passes
    beta: float = 0.75  # threshold floor
    gamma: float = -5.0  # threshold sharpness
    alpha_ema: float = 0.99
    lr: float = 2.5e-4
    weight_decay: float = 5e-5
    poly_power: float = 0.9
    lambda_max: float = 1.0
    lambda_ramp_frac: float = 0.1  # ramp length as a fraction of t_max
    smoothing_eps: float = 1.0  # spatial prior Laplace smoothing
    meta_groups: list[list[int]] = field(default_factory=lambda: [[4, 5], [6, 7]])
    eval_every: int = 250
    force_u_one: bool = False  # ablation: override U_M with all-ones

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.consistency_loss not in CONSISTENCY_LOSSES:
            raise ValueError(f"consistency_loss must be one of {CONSISTENCY_LOSSES}")
        if self.t_max < 1 or self.eval_every < 1 or self.n_copies < 1:
            raise ValueError("t_max, eval_every, n_copies must be >= 1")
        if self.sigma < 0 or not 0 < self.beta <= 1 or not 0 <= self.alpha_ema <= 1:
            raise ValueError("bad sigma/beta/alpha_ema")
        if self.lambda_ramp_frac <= 0 or self.lambda_max < 0:
            raise ValueError("bad lambda schedule")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def with_overrides(self, pairs: list[str]) -> "TrainConfig":
        """Apply `key=value` strings, coercing to the field's type."""
        updates = {}
        by_name = {f.name: f for f in fields(self)}
        for pair in pairs:
            if "=" not in pair:
                raise ValueError(f"override must be key=value, got {pair!r}")
            key, value = pair.split("=", 1)
            if key not in by_name:
                raise ValueError(f"unknown config key {key!r}")
            current = getattr(self, key)
            if isinstance(current, bool):
                updates[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                updates[key] = int(value)
            elif isinstance(current, float):
                updates[key] = float(value)
            elif isinstance(current, list):
                updates[key] = json.loads(value)
            else:
                updates[key] = value
        cfg = replace(self, **updates)
        cfg.validate()
        return cfg

    def to_json(self, path) -> None:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class EvalReport:
    confusion: np.ndarray  # (C, C) counts, rows = ground truth
    per_class_iou: np.ndarray  # NaN for classes absent on both sides
    miou: float

    def to_dict(self) -> dict:
        ious = [None if np.isnan(v) else float(v) for v in self.per_class_iou]
        return {
            "miou": self.miou,
            "per_class_iou": ious,
            "confusion": self.confusion.astype(int).tolist(),
        }


def evaluate(params, dataset: Dataset, num_classes: int, ignore_id: int = IGNORE_ID) -> EvalReport:
    """Confusion matrix and mIoU of argmax predictions over a labeled set."""
    if dataset.labels is None:
        raise ValueError("evaluation needs a labeled dataset")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for i in range(len(dataset)):
        pred = np.argmax(forward(params, dataset.images[i]), axis=0)
        gt = dataset.labels[i]
        valid = gt != ignore_id
        idx = gt[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
        confusion += np.bincount(idx, minlength=num_classes * num_classes).reshape(
            num_classes, num_classes
        )
    return report_from_confusion(confusion)


def report_from_confusion(confusion: np.ndarray) -> EvalReport:
    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    present = union > 0
    miou = float(iou[present].mean()) if present.any() else 0.0
    return EvalReport(confusion=confusion, per_class_iou=iou, miou=miou)


@dataclass
class TrainState:
    config: TrainConfig
    model: StudentTeacher
    opt: AdamState
    prior: SpatialPrior
    meta: MetaClassList
    rng_root: SeededRng
    t: int = 0

    # classmix uses a flat prior and no groups; built lazily once
    _flat_prior: SpatialPrior | None = None
    _empty_meta: MetaClassList | None = None

    def mask_inputs(self) -> tuple[SpatialPrior, MetaClassList]:
        if self.config.method == "classmix":
            if self._flat_prior is None:
                c, h, w = self.prior.q.shape
                self._flat_prior = uniform_prior(c, h, w)
                self._empty_meta = MetaClassList(groups=())
            return self._flat_prior, self._empty_meta
        return self.prior, self.meta


def init_train_state(config: TrainConfig, prior: SpatialPrior) -> TrainState:
    config.validate()
    root = SeededRng(config.seed)
    student = init_segmenter(config.num_classes, root.child(_STREAM_INIT), dtype=np.float32)
    model = StudentTeacher(student=student, teacher=student.copy(), alpha=config.alpha_ema)
    return TrainState(
        config=config,
        model=model,
        opt=AdamState.for_params(student),
        prior=prior,
        meta=MetaClassList(groups=tuple(frozenset(g) for g in config.meta_groups)),
        rng_root=root,
    )


def train_step(
    state: TrainState,
    x_s: np.ndarray,
    y_s: np.ndarray,
    x_t: np.ndarray,
    hook=None,
) -> tuple[LossBreakdown, MixedBatch | None]:
    """One optimization step; mutates the model, optimizer, and counter."""
    cfg = state.config
    st = state.model
    t = state.t
    step_rng = state.rng_root.child(_STREAM_STEPS).child(t)

    lam = consistency_weight(t, cfg.lambda_max, max(1, int(cfg.lambda_ramp_frac * cfg.t_max)))

    # student on the source image (always needed)
    logits_s, cache_s = forward_with_cache(st.student, x_s)
    probs_s = softmax_channelwise(logits_s)
    l_seg = seg_loss(probs_s, y_s)
    grad_logits_s = softmax_backward(probs_s, seg_loss_grad(probs_s, y_s))

    l_con = 0.0
    mixed: MixedBatch | None = None
    h_threshold = float("nan")
    u_fraction = float("nan")
    valid_fraction = float((y_s != IGNORE_ID).mean())
    grads_m: SegmenterGrads | None = None

    if cfg.method != "source_only":
        # one batched teacher pass: clean probabilities feed the mask and
        # pseudo-labels, the noisy copies feed the significance path
        teacher_probs, p_hat = clean_and_mean_probs(
            st.teacher, x_t, cfg.n_copies, cfg.sigma, step_rng.child(1)
        )
        y_t_hat = np.argmax(teacher_probs, axis=0).astype(np.uint8)

        prior, meta = state.mask_inputs()
        cmask, _ = generate_contextual_mask(teacher_probs, prior, meta, step_rng.child(0))

        x_m = mix_images(x_s, x_t, cmask)
        y_m = mix_labels(y_s, y_t_hat, cmask)

        zeta = predictive_entropy(p_hat)
        h_threshold = dynamic_threshold(
            zeta, ThresholdParams(beta=cfg.beta, gamma=cfg.gamma, t=t, t_max=cfg.t_max)
        )
        u_t = significance_mask(zeta, h_threshold)
        u_m = mix_significance(u_t, cmask)
        if cfg.method == "classmix" or cfg.force_u_one:
            u_m = np.ones_like(u_m)
        u_fraction = float(u_m.mean())
        mixed = MixedBatch(x_m=x_m, y_m=y_m, u_m=u_m, mask=cmask)
        valid_fraction = float((y_m != IGNORE_ID).mean())

        logits_m, cache_m = forward_with_cache(st.student, x_m)
        probs_m = softmax_channelwise(logits_m)
        if cfg.consistency_loss == "src":
            l_con = src_loss(probs_m, y_m, u_m)
            grad_probs_m = src_loss_grad(probs_m, y_m, u_m)
        elif cfg.consistency_loss == "ce":
            l_con = seg_loss(probs_m, y_m)
            grad_probs_m = seg_loss_grad(probs_m, y_m)
        else:  # mse
            l_con = mse_loss(probs_m, y_m)
            grad_probs_m = mse_loss_grad(probs_m, y_m)
        grad_logits_m = softmax_backward(probs_m, lam * grad_probs_m)
        grads_m = backward_from_cache(st.student, cache_m, grad_logits_m)

    l_total = total_loss(l_seg, l_con, lam)
    if not np.isfinite(l_total):
        dump = _dump_nan_batch(state, x_s, y_s, x_t)
        raise TrainingDiverged(t, dump)

    grads = backward_from_cache(st.student, cache_s, grad_logits_s)
    if grads_m is not None:
        for g, gm in zip(grads.tensors(), grads_m.tensors()):
            g += gm

    lr_t = poly_lr(cfg.lr, t, cfg.t_max, cfg.poly_power)
    adam_step(st.student, grads, state.opt, lr_t, cfg.weight_decay)
    if hook is not None:
        hook("optim_step", t)
    ema_update(st)
    if hook is not None:
        hook("ema_update", t)
    state.t += 1

    breakdown = LossBreakdown(
        l_seg=l_seg,
        l_con=l_con,
        lambda_con=lam,
        l_total=l_total,
        valid_pixel_fraction=valid_fraction,
        h_threshold=h_threshold,
        u_fraction=u_fraction,
    )
    return breakdown, mixed


def _dump_nan_batch(state: TrainState, x_s, y_s, x_t) -> str:
    dump_dir = Path(getattr(state.config, "_out_dir", ".")) / f"nan_dump_t{state.t}"
    dump_dir.mkdir(parents=True, exist_ok=True)
    camx.write_tensor(dump_dir / "x_s.camx", np.asarray(x_s, dtype=np.float64))
    camx.write_tensor(dump_dir / "y_s.camx", np.asarray(y_s, dtype=np.float64))
    camx.write_tensor(dump_dir / "x_t.camx", np.asarray(x_t, dtype=np.float64))
    return str(dump_dir)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


CSV_HEADER = "t,l_seg,l_con,lambda,l_total,H,sum_u_fraction,miou_target,miou_source"


@dataclass
class TrainResult:
    final_checkpoint: str
    best_checkpoint: str
    metrics_path: str
    final_miou: float
    best_miou: float
    best_t: int
    eval_history: list[tuple[int, float]]


def train(config: TrainConfig, out_dir, hook=None) -> TrainResult:
    """Run config.t_max steps; write metrics.csv plus final/best checkpoints."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config._out_dir = str(out)  # for NaN postmortems

    source = load_dataset(config.source_train)
    target = load_dataset(config.target_train)
    target_eval = load_dataset(config.target_eval)
    source_eval = load_dataset(config.source_eval) if config.source_eval else None
    if source.labels is None:
        raise ValueError("source_train must be labeled")

    prior = build_spatial_prior(list(source.labels), config.num_classes, config.smoothing_eps)
    state = init_train_state(config, prior)
    data_rng = state.rng_root.child(_STREAM_DATA)

    rows = [CSV_HEADER]
    eval_history: list[tuple[int, float]] = []
    best_miou, best_t = -1.0, -1
    best_dir = out / "checkpoint_best"
    final_dir = out / "checkpoint_final"

    for t in range(config.t_max):
        si = int(data_rng.integers(0, len(source)))
        ti = int(data_rng.integers(0, len(target)))
        breakdown, _ = train_step(state, source.images[si], source.labels[si], target.images[ti], hook=hook)

        miou_t_str = ""
        miou_s_str = ""
        if (t + 1) % config.eval_every == 0 or t + 1 == config.t_max:
            report = evaluate(state.model.teacher, target_eval, config.num_classes)
            eval_history.append((t + 1, report.miou))
            miou_t_str = _fmt(report.miou)
            if source_eval is not None:
                miou_s_str = _fmt(evaluate(state.model.teacher, source_eval, config.num_classes).miou)
            if report.miou > best_miou:
                best_miou, best_t = report.miou, t + 1
                save_checkpoint(best_dir, state.model, state.opt, t + 1)
        h_str = "" if np.isnan(breakdown.h_threshold) else _fmt(breakdown.h_threshold)
        u_str = "" if np.isnan(breakdown.u_fraction) else _fmt(breakdown.u_fraction)
        rows.append(
            f"{t},{_fmt(breakdown.l_seg)},{_fmt(breakdown.l_con)},{_fmt(breakdown.lambda_con)},"
            f"{_fmt(breakdown.l_total)},{h_str},{u_str},{miou_t_str},{miou_s_str}"
        )

    save_checkpoint(final_dir, state.model, state.opt, config.t_max)
    metrics_path = out / "metrics.csv"
    metrics_path.write_text("\n".join(rows) + "\n")
    config.to_json(out / "config.json")
    return TrainResult(
        final_checkpoint=str(final_dir),
        best_checkpoint=str(best_dir),
        metrics_path=str(metrics_path),
        final_miou=eval_history[-1][1],
        best_miou=best_miou,
        best_t=best_t,
        eval_history=eval_history,
    )
