"""Procedural two-domain street scenes with structural class rules.

Eight classes with fixed layout semantics:

    0 sky       only in rows [0, 0.4*H)
    1 road      only in rows [0.6*H, H)
    2 sidewalk  only in road rows, horizontally flanking the road strip
    3 building  filler everywhere else (facades, ground)
    4 pole      vertical bars standing beside the road
    5 sign      small boxes, each touching a pole
    6 vehicle   rectangles on the road
    7 rider     blobs sitting on top of vehicles

Both domains share the same geometry generator, so the label statistics
match; the target domain differs only by an appearance shift (hue rotation,
brightness offset, additive noise) applied to the rendered pixels.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .rng import SeededRng

IGNORE_ID = 255
NUM_CLASSES = 8

CLASS_NAMES = ("sky", "road", "sidewalk", "building", "pole", "sign", "vehicle", "rider")

DEFAULT_PALETTE = np.array(
    [
        [0.40, 0.65, 0.95],  # sky
        [0.18, 0.18, 0.20],  # road
        [0.65, 0.63, 0.58],  # sidewalk
        [0.52, 0.28, 0.16],  # building
        [0.85, 0.78, 0.20],  # pole
        [0.90, 0.15, 0.15],  # sign
        [0.15, 0.55, 0.30],  # vehicle
        [0.80, 0.30, 0.75],  # rider
    ]
)

# Context groups that get pasted together: {pole, sign} and {vehicle, rider}.
DEFAULT_META_GROUPS = (frozenset({4, 5}), frozenset({6, 7}))


@dataclass(frozen=True)
class ShiftParams:
    """Appearance gap between domains; all zero for the source domain."""

    brightness_delta: float = 0.0
    hue_rotation: float = 0.0
    texture_noise_sigma: float = 0.0

    def is_zero(self) -> bool:
        return self.brightness_delta == 0 and self.hue_rotation == 0 and self.texture_noise_sigma == 0


DEFAULT_TARGET_SHIFT = ShiftParams(brightness_delta=-0.10, hue_rotation=1.25, texture_noise_sigma=0.04)


@dataclass(frozen=True)
class MetaClassList:
    """Disjoint groups of class ids with mutual contextual dependency."""

    groups: tuple[frozenset[int], ...] = DEFAULT_META_GROUPS

    def __post_init__(self):
        seen: set[int] = set()
        for g in self.groups:
            if seen & g:
                raise ValueError("meta-class groups must be pairwise disjoint")
            seen |= g

    def group_of(self, class_id: int) -> frozenset[int] | None:
        for g in self.groups:
            if class_id in g:
                return g
        return None


@dataclass(frozen=True)
class SceneSpec:
    domain: str  # "source" or "target"
    height: int = 64
    width: int = 64
    num_classes: int = NUM_CLASSES
    palette: np.ndarray = field(default_factory=lambda: DEFAULT_PALETTE.copy())
    shift: ShiftParams = field(default_factory=ShiftParams)

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be source|target, got {self.domain!r}")
        if self.num_classes != len(self.palette):
            raise ValueError("palette must have one RGB entry per class")
        if self.domain == "source" and not self.shift.is_zero():
            raise ValueError("source domain must have a zero shift")


def source_spec(height: int = 64, width: int = 64) -> SceneSpec:
    return SceneSpec(domain="source", height=height, width=width)


def target_spec(height: int = 64, width: int = 64, shift: ShiftParams = DEFAULT_TARGET_SHIFT) -> SceneSpec:
    return SceneSpec(domain="target", height=height, width=width, shift=shift)


def _draw_labels(h: int, w: int, rng: SeededRng) -> np.ndarray:
    lbl = np.full((h, w), 3, dtype=np.uint8)  # building fills by default

    sky_cap = int(0.4 * h)  # sky rows strictly above this
    road_top = int(math.ceil(0.6 * h))  # road rows at or below this

    # skyline: piecewise-constant building tops; sky above each block
    n_blocks = int(rng.integers(3, 7))
    edges = np.sort(rng.integers(1, w, size=n_blocks - 1)) if n_blocks > 1 else np.array([], dtype=int)
    bounds = np.concatenate(([0], edges, [w]))
    for b in range(len(bounds) - 1):
        c0, c1 = int(bounds[b]), int(bounds[b + 1])
        if c1 <= c0:
            continue
        top = int(rng.integers(int(0.15 * h), sky_cap + 1))
        lbl[:top, c0:c1] = 0

    # road strip with sidewalks flanking it in the same rows
    road_w_min = max(4, w // 3)
    road_l = int(rng.integers(2, max(3, w - road_w_min - 2)))
    road_r = int(rng.integers(road_l + road_w_min, w - 1))
    lbl[road_top:, road_l:road_r] = 1
    sw = max(2, w // 16)
    lbl[road_top:, max(0, road_l - sw) : road_l] = 2
    lbl[road_top:, road_r : min(w, road_r + sw)] = 2

    # vehicles in disjoint column slots inside the road, 1px margin off the edges
    n_veh = int(rng.integers(0, 4))
    inner_l, inner_r = road_l + 1, road_r - 1
    if n_veh > 0 and inner_r - inner_l >= 4 * n_veh:
        slot_w = (inner_r - inner_l) // n_veh
        for v in range(n_veh):
            s0 = inner_l + v * slot_w
            vw = int(rng.integers(3, max(4, slot_w - 1)))
            vw = min(vw, slot_w - 1)
            vh = int(rng.integers(max(3, h // 12), max(4, h // 6)))
            x0 = s0 + int(rng.integers(0, slot_w - vw)) if slot_w > vw else s0
            bottom = int(rng.integers(road_top + vh, h + 1))
            top = bottom - vh
            lbl[top:bottom, x0 : x0 + vw] = 6
            if rng.integers(0, 2) == 1 and top > 2:  # rider on top, touching the roof
                rw = max(1, vw // 2)
                rh = int(rng.integers(2, max(3, h // 10)))
                rx = x0 + (vw - rw) // 2
                r_top = max(0, top - rh)
                lbl[r_top:top, rx : rx + rw] = 7

    # poles beside the road (outside road+sidewalk columns), signs attached
    side_ranges = []
    if road_l - sw - 4 > 2:
        side_ranges.append((1, road_l - sw - 3))
    if w - (road_r + sw) - 4 > 2:
        side_ranges.append((road_r + sw + 1, w - 3))
    n_pole = int(rng.integers(0, 3))
    used_cols: list[int] = []
    for _ in range(n_pole):
        if not side_ranges:
            break
        lo, hi = side_ranges[int(rng.integers(0, len(side_ranges)))]
        col = int(rng.integers(lo, hi))
        if any(abs(col - u) < 6 for u in used_cols):
            continue
        used_cols.append(col)
        p_top = int(rng.integers(int(0.35 * h), int(0.5 * h)))
        lbl[p_top:road_top, col : col + 2] = 4
        sign_h = int(rng.integers(2, 5))
        sign_w = int(rng.integers(2, 5))
        sx = col + 2 if col + 2 + sign_w < w else col - sign_w
        if sx >= 0:
            lbl[p_top : p_top + sign_h, sx : sx + sign_w] = 5
    return lbl


def _hue_rotation_matrix(theta: float) -> np.ndarray:
    """Rotation of RGB vectors about the gray axis (1,1,1)/sqrt(3)."""
    axis = np.ones(3) / math.sqrt(3.0)
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def _render(lbl: np.ndarray, palette: np.ndarray, rng: SeededRng) -> np.ndarray:
    h, w = lbl.shape
    img = palette[lbl].transpose(2, 0, 1).copy()  # (3, H, W)

    # low-frequency lighting field plus fine grain, shared across channels
    coarse = rng.uniform(-0.08, 0.08, (max(2, h // 8), max(2, w // 8)))
    ys = np.linspace(0, coarse.shape[0] - 1, h)
    xs = np.linspace(0, coarse.shape[1] - 1, w)
    y0 = np.clip(ys.astype(int), 0, coarse.shape[0] - 2)
    x0 = np.clip(xs.astype(int), 0, coarse.shape[1] - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    shade = c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx + c10 * fy * (1 - fx) + c11 * fy * fx
    grain = 0.015 * rng.standard_normal((h, w))
    img *= 1.0 + shade + grain
    return np.clip(img, 0.0, 1.0)


def _apply_shift(img: np.ndarray, shift: ShiftParams, rng: SeededRng) -> np.ndarray:
    out = img
    if shift.hue_rotation != 0:
        m = _hue_rotation_matrix(shift.hue_rotation)
        out = np.einsum("ij,jhw->ihw", m, out)
    if shift.brightness_delta != 0:
        out = out + shift.brightness_delta
    if shift.texture_noise_sigma > 0:
        out = out + shift.texture_noise_sigma * rng.standard_normal(out.shape[1:])[None]
    return np.clip(out, 0.0, 1.0)


def generate_scene(spec: SceneSpec, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """One scene: (3, H, W) float image in [0, 1] and (H, W) uint8 labels.

    Geometry, texture, and shift noise draw from separate child streams, so
    source and target specs with the same rng produce identical label maps.
    """
    if spec.height < 32 or spec.width < 32:
        raise ValueError(f"scene size must be >= 32, got {spec.height}x{spec.width}")
    lbl = _draw_labels(spec.height, spec.width, rng.child(0))
    img = _render(lbl, spec.palette, rng.child(1))
    if spec.domain == "target":
        img = _apply_shift(img, spec.shift, rng.child(2))
    return img, lbl


def image_to_u8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0,1] -> (H, W, 3) uint8 for PPM writing."""
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def u8_to_image(pixels: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0,1]."""
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)


def build_dataset(spec: SceneSpec, count: int, out_dir, rng: SeededRng, unlabeled: bool = False) -> Path:
    """Write `count` scenes plus manifest.json; returns the manifest path.

    Scene i draws from rng.child(i), so regeneration from the recorded
    (seed, stream) is byte-identical regardless of generation order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(count):
        img, lbl = generate_scene(spec, rng.child(i))
        img_name = f"img_{i:05d}.ppm"
        netpbm.write_ppm(out / img_name, image_to_u8(img))
        entry = {"image": img_name}
        if not unlabeled:
            lbl_name = f"lbl_{i:05d}.pgm"
            netpbm.write_pgm(out / lbl_name, lbl)
            entry["labels"] = lbl_name
        files.append(entry)
    manifest = {
        "version": 1,
        "domain": spec.domain,
        "num_classes": spec.num_classes,
        "count": count,
        "seed": rng.seed,
        "stream": rng.stream,
        "height": spec.height,
        "width": spec.width,
        "unlabeled": unlabeled,
        "shift": {
            "brightness_delta": spec.shift.brightness_delta,
            "hue_rotation": spec.shift.hue_rotation,
            "texture_noise_sigma": spec.shift.texture_noise_sigma,
        },
        "files": files,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


@dataclass
class Dataset:
    """In-memory dataset: images (N, 3, H, W) float32, labels (N, H, W) or None."""

    images: np.ndarray
    labels: np.ndarray | None
    domain: str
    num_classes: int

    def __len__(self) -> int:
        return self.images.shape[0]


def load_dataset(dir_path) -> Dataset:
    dir_path = Path(dir_path)
    manifest = json.loads((dir_path / "manifest.json").read_text())
    images = []
    labels = [] if not manifest["unlabeled"] else None
    for entry in manifest["files"]:
        images.append(u8_to_image(netpbm.read_ppm(dir_path / entry["image"])))
        if labels is not None:
            labels.append(netpbm.read_pgm(dir_path / entry["labels"]))
    return Dataset(
        images=np.stack(images),
        labels=np.stack(labels) if labels is not None else None,
        domain=manifest["domain"],
        num_classes=manifest["num_classes"],
    )


def dataset_digest(dir_path) -> str:
    """SHA-256 over all files in the dataset directory, for determinism checks."""
    dir_path = Path(dir_path)
    h = hashlib.sha256()
    for p in sorted(dir_path.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()
