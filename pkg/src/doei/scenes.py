"""Synthetic multi-object scenes with pixel ground truth.

Each class is a coloured shape. Co-occurrence rules paint a companion
texture into the background (mask label 0) whenever a trigger class is
present, so a classifier that leans on the texture produces measurable
false positives. Every sample draws from its own generator seeded by
``(seed, index)``, so samples can be produced in any order.
"""

from __future__ import annotations

import colorsys
import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import pnm

SHAPES = ("circle", "square", "triangle", "ring", "cross")
TEXTURES = ("stripes", "checker", "dots", "diagonal", "grid")
MIN_VISIBLE = 0.25
MAX_RETRIES = 200


class GenerationError(RuntimeError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"sample {index}: {reason}")
        self.index = index


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    shape: str
    hue: float


@dataclass(frozen=True)
class CooccurrenceRule:
    trigger: int
    texture: str
    probability: float


def default_classes(n: int) -> tuple[ClassSpec, ...]:
    return tuple(ClassSpec(c + 1, SHAPES[c % len(SHAPES)], c / n) for c in range(n))


def default_rules(n: int, probability: float) -> tuple[CooccurrenceRule, ...]:
    return tuple(CooccurrenceRule(c + 1, TEXTURES[c % len(TEXTURES)], probability) for c in range(n))


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 64
    classes: tuple[ClassSpec, ...] = field(default_factory=lambda: default_classes(5))
    objects_min: int = 1
    objects_max: int = 3
    cooccurrence_rules: tuple[CooccurrenceRule, ...] = field(default_factory=lambda: default_rules(5, 0.8))
    noise_std: float = 0.03
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def validate(self, num_classes: int | None = None) -> "SceneSpec":
        if num_classes is not None and num_classes != self.num_classes:
            raise ValueError(f"scene has {self.num_classes} classes, model expects {num_classes}")
        ids = [c.class_id for c in self.classes]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise ValueError(f"class ids must be 1..C, got {ids}")
        hues = [round(c.hue % 1.0, 9) for c in self.classes]
        if len(set(hues)) != len(hues):
            raise ValueError("class hues must be pairwise distinct")
        for c in self.classes:
            if c.shape not in SHAPES:
                raise ValueError(f"unknown shape {c.shape!r}")
        for r in self.cooccurrence_rules:
            if not 0.0 <= r.probability <= 1.0:
                raise ValueError(f"rule probability {r.probability} outside [0, 1]")
            if r.texture not in TEXTURES:
                raise ValueError(f"unknown texture {r.texture!r}")
            if r.trigger not in ids:
                raise ValueError(f"rule trigger {r.trigger} is not a class id")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ValueError("need 1 <= objects_min <= objects_max")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.canvas < 16:
            raise ValueError("canvas must be at least 16 pixels")
        return self


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3) float64 on the 8-bit grid k/255
    labels: np.ndarray  # (C,) multi-hot int
    gt_mask: np.ndarray  # (H, W) uint8, 0 = background
    texture_mask: np.ndarray  # (H, W) bool, visible companion-texture pixels

    @property
    def class_ids(self) -> list[int]:
        return [int(c) + 1 for c in np.flatnonzero(self.labels)]


def hue_rgb(hue: float, sat: float = 0.85, val: float = 0.9) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, sat, val))


def shape_mask(kind: str, canvas: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas] + 0.5
    dx, dy = xx - cx, yy - cy
    dist = np.hypot(dx, dy)
    if kind == "circle":
        return dist <= r
    if kind == "square":
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if kind == "triangle":
        frac = (dy + r) / (2 * r)
        return (frac >= 0) & (frac <= 1) & (np.abs(dx) <= frac * r)
    if kind == "ring":
        return (dist <= r) & (dist >= 0.55 * r)
    if kind == "cross":
        arm = 0.3 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {kind!r}")


def texture_pattern(kind: str, canvas: int, phase: int) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    xx = xx + phase
    if kind == "stripes":
        return (yy + phase) % 4 < 2
    if kind == "checker":
        return ((xx // 2) + (yy // 2)) % 2 == 0
    if kind == "dots":
        return (xx % 4 == 0) & (yy % 4 == 0)
    if kind == "diagonal":
        return (xx + yy) % 5 < 2
    if kind == "grid":
        return (xx % 5 == 0) | (yy % 5 == 0)
    raise ValueError(f"unknown texture {kind!r}")


def _texture_colour(kind: str) -> np.ndarray:
    hue = (TEXTURES.index(kind) + 0.5) / len(TEXTURES)
    return hue_rgb(hue, sat=0.45, val=0.35)


def _generate_one(spec: SceneSpec, index: int) -> SceneSample:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.canvas
    by_id = {c.class_id: c for c in spec.classes}
    for _ in range(MAX_RETRIES):
        count = int(rng.integers(spec.objects_min, spec.objects_max + 1))
        ids = rng.choice(np.arange(1, spec.num_classes + 1), size=count, replace=True)
        objects = []
        for cid in ids:
            r = rng.uniform(0.11 * size, 0.2 * size)
            cx, cy = rng.uniform(r, size - r, size=2)
            objects.append((int(cid), shape_mask(by_id[int(cid)].shape, size, cx, cy, r)))
        owner = np.full((size, size), -1)
        for k, (_, m) in enumerate(objects):
            owner[m] = k
        if all((owner == k).sum() >= max(1, MIN_VISIBLE * m.sum()) for k, (_, m) in enumerate(objects)):
            break
    else:
        raise GenerationError(index, "could not place objects with enough visibility")

    present = {cid for cid, _ in objects}
    image = np.empty((size, size, 3))
    image[:] = rng.uniform(0.45, 0.65) + rng.uniform(-0.04, 0.04, size=3)
    textured = np.zeros((size, size), dtype=bool)
    for rule in spec.cooccurrence_rules:
        draw = rng.random()
        if rule.trigger not in present or draw >= rule.probability:
            continue
        w, h = rng.integers(size // 3, size // 2 + 1, size=2)
        x0, y0 = rng.integers(0, size - w + 1), rng.integers(0, size - h + 1)
        region = np.zeros((size, size), dtype=bool)
        region[y0 : y0 + h, x0 : x0 + w] = True
        ink = region & texture_pattern(rule.texture, size, int(rng.integers(0, 4)))
        image[ink] = _texture_colour(rule.texture)
        textured |= region

    gt = np.zeros((size, size), dtype=np.uint8)
    for cid, m in objects:
        image[m] = hue_rgb(by_id[cid].hue)
        gt[m] = cid
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    labels = np.zeros(spec.num_classes, dtype=np.int64)
    for cid in np.unique(gt[gt > 0]):
        labels[cid - 1] = 1
    return SceneSample(image, labels, gt, textured & (gt == 0))


def generate(spec: SceneSpec, count: int, start: int = 0) -> list[SceneSample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    spec.validate()
    return [_generate_one(spec, start + i) for i in range(count)]


def stack(samples: list[SceneSample]) -> tuple[np.ndarray, np.ndarray]:
    """Images (B, H, W, 3) and labels (B, C) as arrays."""
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])


# --------------------------------------------------------------------------
# on-disk layout: images/NNNN.ppm, masks/NNNN.pgm, textures/NNNN.pgm, manifest.csv

MANIFEST_FIELDS = ("index", "image_path", "mask_path", "labels")


def write_dataset(samples: list[SceneSample], out_dir) -> str:
    """Write images, masks, texture masks and the manifest; returns the manifest path."""
    for sub in ("images", "masks", "textures"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        name = f"{i:04d}"
        img_rel = f"images/{name}.ppm"
        mask_rel = f"masks/{name}.pgm"
        pnm.write_ppm(os.path.join(out_dir, img_rel), np.round(s.image * 255).astype(np.uint8))
        pnm.write_pgm(os.path.join(out_dir, mask_rel), s.gt_mask)
        pnm.write_pgm(os.path.join(out_dir, "textures", f"{name}.pgm"), s.texture_mask.astype(np.uint8))
        rows.append((i, img_rel, mask_rel, ";".join(str(c) for c in s.class_ids)))
    return dataset_manifest(rows, out_dir)


def dataset_manifest(rows, out_dir) -> str:
    path = os.path.join(out_dir, "manifest.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    return path


@dataclass
class ManifestEntry:
    index: int
    image_path: str
    mask_path: str
    class_ids: list[int]


def read_manifest(path) -> list[ManifestEntry]:
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: expected columns {','.join(MANIFEST_FIELDS)}")
        for row in reader:
            ids = [int(x) for x in row["labels"].split(";") if x]
            entries.append(
                ManifestEntry(
                    int(row["index"]),
                    os.path.join(base, row["image_path"]),
                    os.path.join(base, row["mask_path"]),
                    ids,
                )
            )
    return entries


def load_samples(path, num_classes: int) -> list[SceneSample]:
    """Read a manifest back into samples (texture masks when present)."""
    out = []
    for e in read_manifest(path):
        image = pnm.read_ppm(e.image_path).astype(np.float64) / 255.0
        mask = pnm.read_pgm(e.mask_path)
        labels = np.zeros(num_classes, dtype=np.int64)
        for c in e.class_ids:
            if not 1 <= c <= num_classes:
                raise ValueError(f"{path}: label {c} outside 1..{num_classes}")
            labels[c - 1] = 1
        tex_path = os.path.join(os.path.dirname(os.path.dirname(e.mask_path)), "textures", os.path.basename(e.mask_path))
        texture = pnm.read_pgm(tex_path).astype(bool) if os.path.exists(tex_path) else np.zeros(mask.shape, dtype=bool)
        out.append(SceneSample(image, labels, mask, texture))
    return out
