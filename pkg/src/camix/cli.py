"""Command-line entry points: gen-data, train, eval, inspect-mix.

Exit codes: 0 success, 1 usage error, 2 runtime error. All randomness flows
from the seed flags / config seed, so reruns with equal inputs are
reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import netpbm
from .context import generate_contextual_mask
from .losses import consistency_weight
from .mixing import mix_images, mix_labels, mix_significance
from .ops import softmax_channelwise
from .prior import build_spatial_prior
from .rng import SeededRng
from .scenes import (
    DEFAULT_PALETTE,
    build_dataset,
    image_to_u8,
    load_dataset,
    source_spec,
    target_spec,
)
from .segmenter import forward, load_checkpoint
from .significance import (
    ThresholdParams,
    dynamic_threshold,
    predictive_entropy,
    significance_mask,
    stochastic_mean_probs,
)
from .trainer import _STREAM_DATA, TrainConfig, TrainingDiverged, evaluate, init_train_state, train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise _UsageError(message)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise _UsageError(f"--size must be HxW, got {text!r}") from exc


def _cmd_gen_data(args) -> int:
    h, w = _parse_size(args.size)
    spec = source_spec(h, w) if args.domain == "source" else target_spec(h, w)
    manifest = build_dataset(spec, args.count, args.out, SeededRng(args.seed), unlabeled=args.unlabeled)
    print(manifest)
    return 0


def _load_config(path: str, overrides: list[str]) -> TrainConfig:
    if not Path(path).exists():
        raise _UsageError(f"config file not found: {path}")
    try:
        cfg = TrainConfig.from_json(path)
        return cfg.with_overrides(overrides or [])
    except (ValueError, json.JSONDecodeError) as exc:
        raise _UsageError(str(exc)) from exc


def _cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set)
    try:
        result = train(cfg, args.out)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        print(exc.dump_dir, file=sys.stderr)
        return 2
    print(f"final mIoU {result.final_miou:.4f} (t={cfg.t_max})")
    print(f"best  mIoU {result.best_miou:.4f} (t={result.best_t})")
    print(result.metrics_path)
    return 0


def _cmd_eval(args) -> int:
    st, _, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    report = evaluate(st.teacher, dataset, st.teacher.num_classes)
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"mIoU {report.miou:.4f} -> {args.out}")
    return 0


def _gray_palette(num_classes: int) -> np.ndarray:
    # luminance of the scene palette, for rendering label maps as PGM
    lum = DEFAULT_PALETTE[:num_classes] @ np.array([0.299, 0.587, 0.114])
    return np.clip(np.round(lum * 255), 0, 255).astype(np.uint8)


def _labels_to_pgm(labels: np.ndarray, num_classes: int) -> np.ndarray:
    gray = _gray_palette(num_classes)
    out = np.zeros(labels.shape, dtype=np.uint8)
    known = labels < num_classes
    out[known] = gray[labels[known]]
    out[~known] = 255
    return out


def _cmd_inspect_mix(args) -> int:
    cfg = _load_config(args.config, args.set)
    if args.seed is not None:
        cfg = cfg.with_overrides([f"seed={args.seed}"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    source = load_dataset(cfg.source_train)
    target = load_dataset(cfg.target_train)
    prior = build_spatial_prior(list(source.labels), cfg.num_classes, cfg.smoothing_eps)
    state = init_train_state(cfg, prior)
    data_rng = state.rng_root.child(_STREAM_DATA)
    si = int(data_rng.integers(0, len(source)))
    ti = int(data_rng.integers(0, len(target)))
    x_s, y_s, x_t = source.images[si], source.labels[si], target.images[ti]

    teacher = state.model.teacher
    step_rng = state.rng_root.child(2).child(0)
    teacher_probs = softmax_channelwise(forward(teacher, x_t))
    y_t_hat = np.argmax(teacher_probs, axis=0).astype(np.uint8)
    mask_prior, meta = state.mask_inputs()
    cmask, _ = generate_contextual_mask(teacher_probs, mask_prior, meta, step_rng.child(0))
    x_m = mix_images(x_s, x_t, cmask)
    y_m = mix_labels(y_s, y_t_hat, cmask)
    p_hat = stochastic_mean_probs(teacher, x_t, cfg.n_copies, cfg.sigma, step_rng.child(1))
    zeta = predictive_entropy(p_hat)
    h = dynamic_threshold(zeta, ThresholdParams(beta=cfg.beta, gamma=cfg.gamma, t=0, t_max=cfg.t_max))
    u_t = significance_mask(zeta, h)
    u_m = mix_significance(u_t, cmask)
    lam = consistency_weight(0, cfg.lambda_max, max(1, int(cfg.lambda_ramp_frac * cfg.t_max)))

    netpbm.write_ppm(out / "x_s.ppm", image_to_u8(x_s))
    netpbm.write_ppm(out / "x_t.ppm", image_to_u8(x_t))
    netpbm.write_ppm(out / "x_m.ppm", image_to_u8(x_m))
    netpbm.write_pgm(out / "m.pgm", (cmask.m * 255).astype(np.uint8))
    netpbm.write_pgm(out / "y_m.pgm", _labels_to_pgm(y_m, cfg.num_classes))
    zeta_scaled = np.clip(zeta / math.log(cfg.num_classes), 0, 1)
    netpbm.write_pgm(out / "zeta.pgm", np.round(zeta_scaled * 255).astype(np.uint8))
    netpbm.write_pgm(out / "u_t.pgm", (u_t * 255).astype(np.uint8))
    netpbm.write_pgm(out / "u_m.pgm", (u_m * 255).astype(np.uint8))
    step = {
        "selected_classes": sorted(cmask.selected_classes),
        "H": h,
        "K_sup": float(zeta.max()),
        "lambda": lam,
    }
    (out / "step.json").write_text(json.dumps(step, indent=2, sort_keys=True) + "\n")
    print(out / "step.json")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="camix", description="Two-domain toy segmentation adaptation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural scene dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--domain", required=True, choices=["source", "target"])
    p.add_argument("--count", required=True, type=int, help="number of scenes")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--size", default="64x64", help="HxW, e.g. 64x64")
    p.add_argument("--unlabeled", action="store_true", help="omit label files")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="run the adaptation loop")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("inspect-mix", help="render one mixup step's artifacts")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_inspect_mix)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
