"""Seeded synthetic segmentation tasks, one heterogeneous family per client.

Families differ in class count, geometry and intensity statistics, so a
federation over them has genuine domain shift for the adversarial
alignment to suppress. Masks are exact rasterizations (noise-free labels)
while images carry Gaussian pixel noise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError
from .nn.checkpoint import save_tensors

FAMILY_CLASSES = {
    "nested_rings": 5,
    "single_blob": 2,
    "two_objects": 3,
    "textured_region": 2,
    "irregular_blob": 2,
}

MIN_IMAGE_SIZE = 16
FOREGROUND_RANGE = (0.05, 0.6)
MAX_REROLLS = 60


@dataclass(frozen=True)
class TaskSpec:
    family: str
    image_size: int = 32
    n_train: int = 200
    n_val: int = 36
    n_test: int = 40
    noise: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILY_CLASSES:
            raise ConfigError(f"unknown task family {self.family!r}")
        if self.image_size < MIN_IMAGE_SIZE:
            raise ConfigError(f"image size {self.image_size} too small for "
                              f"family geometry (minimum {MIN_IMAGE_SIZE})")

    @property
    def num_classes(self):
        return FAMILY_CLASSES[self.family]


@dataclass
class TaskData:
    spec: TaskSpec
    train_images: np.ndarray
    train_masks: np.ndarray
    val_images: np.ndarray
    val_masks: np.ndarray
    test_images: np.ndarray
    test_masks: np.ndarray


def _grid(size):
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _ellipse_mask(size, center, axes, angle):
    rr, cc = _grid(size)
    dr, dc = rr - center[0], cc - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = dr * ca + dc * sa
    v = -dr * sa + dc * ca
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def _draw_nested_rings(size, rng):
    center = size / 2 + rng.uniform(-2, 2, size=2)
    rr, cc = _grid(size)
    radius = np.hypot(rr - center[0], cc - center[1])
    outer = size * rng.uniform(0.34, 0.42)
    bounds = outer * np.array([1.0, 0.75, 0.5, 0.25])
    mask = np.zeros((size, size), dtype=np.int64)
    for c, (hi, lo) in enumerate(zip(bounds[:-1], bounds[1:]), start=1):
        mask[(radius <= hi) & (radius > lo)] = c
    mask[radius <= bounds[-1]] = 4
    image = np.full((size, size), 0.10)
    for c, level in zip(range(1, 5), (0.30, 0.50, 0.70, 0.90)):
        image[mask == c] = level + rng.uniform(-0.04, 0.04)
    return image, mask


def _draw_single_blob(size, rng):
    center = size / 2 + rng.uniform(-size * 0.15, size * 0.15, size=2)
    axes = size * rng.uniform(0.14, 0.28, size=2)
    region = _ellipse_mask(size, center, axes, rng.uniform(0, np.pi))
    mask = region.astype(np.int64)
    image = np.full((size, size), 0.30 + rng.uniform(-0.03, 0.03))
    image[region] = 0.75 + rng.uniform(-0.06, 0.06)
    return image, mask


def _draw_two_objects(size, rng):
    head_center = (size * 0.35 + rng.uniform(-2, 2), size * 0.5 + rng.uniform(-3, 3))
    head_r = size * rng.uniform(0.12, 0.17)
    head = _ellipse_mask(size, head_center, (head_r, head_r * rng.uniform(0.85, 1.0)),
                         rng.uniform(0, np.pi))
    bar_center = (size * 0.75 + rng.uniform(-2, 2), size * 0.5 + rng.uniform(-3, 3))
    bar = _ellipse_mask(size, bar_center, (size * 0.06, size * rng.uniform(0.2, 0.3)),
                        rng.uniform(-0.3, 0.3))
    mask = np.zeros((size, size), dtype=np.int64)
    mask[head] = 1
    mask[bar & ~head] = 2
    image = np.full((size, size), 0.20 + rng.uniform(-0.02, 0.02))
    image[mask == 1] = 0.55 + rng.uniform(-0.04, 0.04)
    image[mask == 2] = 0.88 + rng.uniform(-0.04, 0.04)
    return image, mask


def _draw_textured_region(size, rng):
    center = size / 2 + rng.uniform(-size * 0.08, size * 0.08, size=2)
    axes = size * rng.uniform(0.2, 0.3, size=2)
    region = _ellipse_mask(size, center, axes, rng.uniform(0, np.pi))
    mask = region.astype(np.int64)
    rr, cc = _grid(size)
    image = 0.55 + 0.08 * (cc / size) + rng.uniform(-0.02, 0.02)
    checker = 0.5 + 0.5 * (((rr // 3).astype(int) + (cc // 3).astype(int)) % 2)
    inside = 0.35 + 0.22 * checker
    image[region] = inside[region]
    return image, mask


def _draw_irregular_blob(size, rng):
    center = size / 2 + rng.uniform(-size * 0.1, size * 0.1, size=2)
    base_r = size * rng.uniform(0.18, 0.28)
    coeffs = rng.uniform(0.0, 0.3, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    rr, cc = _grid(size)
    dr, dc = rr - center[0], cc - center[1]
    theta = np.arctan2(dc, dr)
    wobble = sum(a * np.sin((k + 1) * theta + p) for k, (a, p) in enumerate(zip(coeffs, phases)))
    limit = np.maximum(base_r * (1.0 + wobble), 0.35 * base_r)
    region = np.hypot(dr, dc) <= limit
    mask = region.astype(np.int64)
    image = np.full((size, size), 0.12 + rng.uniform(-0.02, 0.02))
    image[region] = 0.62 + rng.uniform(-0.05, 0.05)
    return image, mask


_DRAWERS = {
    "nested_rings": _draw_nested_rings,
    "single_blob": _draw_single_blob,
    "two_objects": _draw_two_objects,
    "textured_region": _draw_textured_region,
    "irregular_blob": _draw_irregular_blob,
}


def _draw_sample(spec, rng):
    drawer = _DRAWERS[spec.family]
    lo, hi = FOREGROUND_RANGE
    for _ in range(MAX_REROLLS):
        image, mask = drawer(spec.image_size, rng)
        frac = np.count_nonzero(mask) / mask.size
        if lo <= frac <= hi and (spec.family != "nested_rings"
                                 or len(np.unique(mask)) == spec.num_classes):
            break
    else:
        raise ConfigError(f"{spec.family}: could not hit foreground fraction "
                          f"{FOREGROUND_RANGE} at size {spec.image_size}")
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return image[None, :, :], mask


def _generate_split(spec, count, split_index):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, split_index, 0xD5]))
    images, masks = [], []
    for _ in range(count):
        img, msk = _draw_sample(spec, rng)
        images.append(img)
        masks.append(msk)
    return np.stack(images), np.stack(masks)


def generate(spec):
    """Build the train/val/test arrays for one task; deterministic per seed,
    with the test split drawn from a disjoint seed stream."""
    train = _generate_split(spec, spec.n_train, 0)
    val = _generate_split(spec, spec.n_val, 1)
    test = _generate_split(spec, spec.n_test, 2)
    return TaskData(spec=spec,
                    train_images=train[0], train_masks=train[1],
                    val_images=val[0], val_masks=val[1],
                    test_images=test[0], test_masks=test[1])


def augment(image, mask, rng):
    """One random choice among identity, horizontal/vertical flip and the
    three square rotations, applied identically to image and mask."""
    if image.shape[-1] != image.shape[-2]:
        raise ConfigError(f"augment: needs square images, got shape {image.shape}")
    op = int(rng.integers(6))
    if op == 0:
        return image, mask
    if op == 1:
        return image[..., :, ::-1].copy(), mask[..., :, ::-1].copy()
    if op == 2:
        return image[..., ::-1, :].copy(), mask[..., ::-1, :].copy()
    k = op - 2
    return (np.rot90(image, k, axes=(-2, -1)).copy(),
            np.rot90(mask, k, axes=(-2, -1)).copy())


def dump_dataset(path_prefix, data):
    """Optional dump: tensors in checkpoint format plus a JSON manifest."""
    save_tensors(f"{path_prefix}.mcsf", [
        data.train_images, data.train_masks.astype(np.float64),
        data.val_images, data.val_masks.astype(np.float64),
        data.test_images, data.test_masks.astype(np.float64),
    ])
    manifest = {
        "family": data.spec.family,
        "image_size": data.spec.image_size,
        "num_classes": data.spec.num_classes,
        "counts": {"train": int(data.train_images.shape[0]),
                   "val": int(data.val_images.shape[0]),
                   "test": int(data.test_images.shape[0])},
        "noise": data.spec.noise,
        "seed": data.spec.seed,
        "tensor_order": ["train_images", "train_masks", "val_images", "val_masks",
                         "test_images", "test_masks"],
    }
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
