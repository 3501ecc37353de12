"""
Masks - regular and free-form hole masks, ratio buckets, augmentation

Masks are uint8 (H, W) arrays with 1 = valid pixel and 0 = hole.
Hole-to-image ratios fall in six half-open buckets (low, high]; bucket ids
run 1..6 and UNBUCKETED (0) marks ratios outside (0.01, 0.6].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import cv2
import numpy as np

import config
from errors import ConfigurationError, MaskGenerationError, ValidationError

logger = logging.getLogger(__name__)

UNBUCKETED = 0
MASK_KINDS = ("regular_center", "freeform")

# Shapes added to one free-form attempt before it is abandoned
MAX_SHAPES_PER_ATTEMPT = 2000

_DILATE_KERNEL = np.ones((3, 3), np.uint8)


def bucket_bounds(bucket: int) -> tuple:
    if not 1 <= bucket <= len(config.MASK_BUCKETS):
        raise ConfigurationError(f"Bucket id must be 1..{len(config.MASK_BUCKETS)}, got {bucket}")
    return config.MASK_BUCKETS[bucket - 1]


def bucket_label(bucket: int) -> str:
    if bucket == UNBUCKETED:
        return "unbucketed"
    low, high = bucket_bounds(bucket)
    return f"{low:g}-{high:g}"


def parse_bucket(text: str) -> int:
    """Accept a bucket id (1..6) or a label such as 0.2-0.3."""
    text = text.strip()
    if text.isdigit():
        bucket = int(text)
        bucket_bounds(bucket)
        return bucket
    for bucket in range(1, len(config.MASK_BUCKETS) + 1):
        if bucket_label(bucket) == text:
            return bucket
    raise ConfigurationError(f"Unknown bucket '{text}'")


@dataclass(frozen=True)
class MaskSpec:
    kind: str
    bucket: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ConfigurationError(f"Mask kind must be one of {MASK_KINDS}, got '{self.kind}'")
        if self.kind == "freeform":
            bucket_bounds(self.bucket)


@dataclass
class FreeformResult:
    mask: np.ndarray
    strokes: int
    ellipses: int
    attempts: int


def check_binary(mask: np.ndarray) -> None:
    if not np.isin(mask, (0, 1)).all():
        raise ValidationError("Mask must be binary (0 = hole, 1 = valid)")


def hole_ratio(mask: np.ndarray) -> float:
    """Fraction of hole (zero) pixels."""
    mask = np.asarray(mask)
    check_binary(mask)
    return float(np.count_nonzero(mask == 0)) / mask.size


def bucket_of(ratio: float) -> int:
    for bucket, (low, high) in enumerate(config.MASK_BUCKETS, start=1):
        if low < ratio <= high:
            return bucket
    return UNBUCKETED


def gen_regular_mask(h: int, w: int) -> np.ndarray:
    """Centered (h/2, w/2) hole; ratio exactly 0.25."""
    if h % 2 or w % 2:
        raise ValidationError(f"Regular mask needs even dims, got {h}x{w}")
    mask = np.ones((h, w), np.uint8)
    mask[h // 4:h // 4 + h // 2, w // 4:w // 4 + w // 2] = 0
    return mask


def _add_stroke(hole: np.ndarray, rng: np.random.Generator) -> None:
    h, w = hole.shape
    side = min(h, w)
    max_len = max(2.0, side * config.STROKE_MAX_LENGTH_FRAC)
    min_width = max(1, int(round(side * config.STROKE_MIN_WIDTH_FRAC)))
    max_width = max(min_width, int(round(side * config.STROKE_MAX_WIDTH_FRAC)))

    thickness = int(rng.integers(min_width, max_width + 1))
    x, y = int(rng.integers(0, w)), int(rng.integers(0, h))
    for _ in range(int(rng.integers(1, config.STROKE_MAX_VERTICES + 1))):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        length = rng.uniform(1.0, max_len)
        nx = int(np.clip(x + length * np.cos(angle), 0, w - 1))
        ny = int(np.clip(y + length * np.sin(angle), 0, h - 1))
        cv2.line(hole, (x, y), (nx, ny), 1, thickness)
        cv2.circle(hole, (nx, ny), max(1, thickness // 2), 1, -1)
        x, y = nx, ny


def _add_ellipse(hole: np.ndarray, rng: np.random.Generator) -> None:
    h, w = hole.shape
    max_axis = max(1, int(min(h, w) * config.ELLIPSE_MAX_AXIS_FRAC))
    center = (int(rng.integers(0, w)), int(rng.integers(0, h)))
    axes = (int(rng.integers(1, max_axis + 1)), int(rng.integers(1, max_axis + 1)))
    angle = float(rng.uniform(0.0, 180.0))
    cv2.ellipse(hole, center, axes, angle, 0, 360, 1, -1)


def gen_freeform_detailed(h: int, w: int, spec: MaskSpec) -> FreeformResult:
    """
    Draw strokes and ellipses until the hole ratio passes the bucket's lower
    bound; an attempt that overshoots the upper bound restarts from a blank
    canvas with a fresh generator keyed on (seed, attempt).

    Raises:
        MaskGenerationError: no attempt landed in the bucket
    """
    low, high = bucket_bounds(spec.bucket)
    for attempt in range(config.MASK_MAX_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, attempt])
        hole = np.zeros((h, w), np.uint8)
        strokes = ellipses = 0
        ratio = 0.0
        for _ in range(MAX_SHAPES_PER_ATTEMPT):
            if rng.random() < config.ELLIPSE_PROB:
                _add_ellipse(hole, rng)
                ellipses += 1
            else:
                _add_stroke(hole, rng)
                strokes += 1
            ratio = float(hole.mean())
            if ratio > low:
                break
        if low < ratio <= high:
            return FreeformResult((1 - hole).astype(np.uint8), strokes, ellipses, attempt + 1)

    raise MaskGenerationError(
        f"No {h}x{w} mask in bucket {bucket_label(spec.bucket)} after "
        f"{config.MASK_MAX_ATTEMPTS} attempts (seed {spec.seed})"
    )


def gen_freeform_mask(h: int, w: int, spec: MaskSpec) -> np.ndarray:
    return gen_freeform_detailed(h, w, spec).mask


def gen_mask(h: int, w: int, spec: MaskSpec) -> np.ndarray:
    if spec.kind == "regular_center":
        return gen_regular_mask(h, w)
    return gen_freeform_mask(h, w, spec)


def dilate_hole(mask: np.ndarray, pixels: int = 1) -> np.ndarray:
    """Grow the hole by `pixels` with a 3x3 square; returns a mask (1 = valid)."""
    hole = (np.asarray(mask) == 0).astype(np.uint8)
    grown = cv2.dilate(hole, _DILATE_KERNEL, iterations=pixels)
    return (1 - grown).astype(np.uint8)


def augment_mask(mask: np.ndarray, seed: int, p: float = config.MASK_AUGMENT_PROB) -> np.ndarray:
    """
    Seeded random subset of: horizontal flip, vertical flip, rotation by a
    multiple of 90 degrees, crop-and-resize back, one-pixel hole dilation.

    Each op is selected with probability p. Rotation of a non-square mask
    is restricted to 180 degrees so the dims are kept.
    """
    mask = np.asarray(mask, dtype=np.uint8)
    check_binary(mask)
    h, w = mask.shape
    rng = np.random.default_rng(seed)
    selected = rng.random(5) < p
    turns = int(rng.integers(1, 4)) if h == w else 2
    crop = rng.uniform(0.75, 1.0)
    offset = rng.random(2)

    out = mask
    if selected[0]:
        out = cv2.flip(out, 1)
    if selected[1]:
        out = cv2.flip(out, 0)
    if selected[2]:
        out = np.ascontiguousarray(np.rot90(out, k=turns))
    if selected[3]:
        ch, cw = max(1, int(h * crop)), max(1, int(w * crop))
        top, left = int(offset[0] * (h - ch)), int(offset[1] * (w - cw))
        patch = np.ascontiguousarray(out[top:top + ch, left:left + cw])
        out = cv2.resize(patch, (w, h), interpolation=cv2.INTER_NEAREST)
    if selected[4]:
        out = dilate_hole(out, 1)
    return out.astype(np.uint8)


def to_batch(masks: list) -> np.ndarray:
    """Stack (H, W) masks into an (n, 1, H, W) float array."""
    return np.stack([np.asarray(m, dtype=np.float64) for m in masks])[:, None]
