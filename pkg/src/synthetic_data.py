"""
Synthetic Data - procedural training images, batches and evaluation sets

Everything is a pure function of seeds: the image set of a run, the batch
drawn at iteration i (generator keyed on [seed, i]) and the masks attached
to it. A resumed run therefore sees exactly the batches the original run
would have seen.
"""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass
from typing import Callable, Optional

import cv2
import numpy as np

import config
from errors import ValidationError
from masks import MaskSpec, augment_mask, bucket_label, gen_freeform_mask, gen_regular_mask, to_batch

logger = logging.getLogger(__name__)

# Offsets that keep training and evaluation image seeds apart
EVAL_SEED_OFFSET = 1_000_003
DATASET_SEED_STRIDE = 100_003


@dataclass
class ImageSample:
    """(3, H, W) pixels in [0, 1] and where they came from."""

    pixels: np.ndarray
    provenance: str

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValidationError(f"ImageSample needs (3, H, W) pixels, got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValidationError("ImageSample pixels must lie in [0, 1]")

    @property
    def hw(self) -> tuple:
        return self.pixels.shape[1:]


def gen_synthetic_image(h: int, w: int, seed: int) -> ImageSample:
    """
    Smooth colour gradient + 2-4 sinusoidal texture fields + 1-3 solid
    rectangles or ellipses, clamped to [0, 1].
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")

    angle = rng.uniform(0.0, 2.0 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 2.0
    c0, c1 = rng.uniform(0.0, 1.0, size=(2, 3))
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * ramp[None]

    for _ in range(int(rng.integers(2, 5))):
        fx, fy = rng.uniform(0.5, 6.0, size=2) * rng.choice([-1.0, 1.0], size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.05, 0.2)
        tint = rng.uniform(-1.0, 1.0, size=3)
        field = np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
        img = img + amp * tint[:, None, None] * field[None]

    for _ in range(int(rng.integers(1, 4))):
        layer = np.zeros((h, w), np.uint8)
        cx, cy = int(rng.integers(0, w)), int(rng.integers(0, h))
        sx = int(rng.integers(max(1, w // 16), max(2, w // 4) + 1))
        sy = int(rng.integers(max(1, h // 16), max(2, h // 4) + 1))
        if rng.random() < 0.5:
            cv2.rectangle(layer, (cx - sx, cy - sy), (cx + sx, cy + sy), 1, -1)
        else:
            cv2.ellipse(layer, (cx, cy), (sx, sy), float(rng.uniform(0, 180)), 0, 360, 1, -1)
        color = rng.uniform(0.0, 1.0, size=3)
        img[:, layer == 1] = color[:, None]

    return ImageSample(np.clip(img, 0.0, 1.0), f"synthetic({seed})")


def build_dataset(size: int, h: int, w: int, seed: int) -> list:
    return [gen_synthetic_image(h, w, seed * DATASET_SEED_STRIDE + i) for i in range(size)]


# ============================================================
# TRAINING BATCHES
# ============================================================

@dataclass
class TrainingBatch:
    iteration: int
    gt: np.ndarray        # (n, 3, H, W)
    mask: np.ndarray      # (n, 1, H, W), 1 = valid
    buckets: list

    @property
    def image_in(self) -> np.ndarray:
        return self.gt * self.mask


def sample_batch(dataset: list, batch_size: int, iteration: int, seed: int,
                 augment: bool = True) -> TrainingBatch:
    """Batch for one iteration: random images, one free-form mask each from a random bucket."""
    rng = np.random.default_rng([seed, iteration])
    picks = rng.integers(0, len(dataset), size=batch_size)
    buckets = rng.integers(1, len(config.MASK_BUCKETS) + 1, size=batch_size)
    mask_seeds = rng.integers(0, 2 ** 31 - 1, size=batch_size)

    h, w = dataset[0].hw
    masks = []
    for bucket, mask_seed in zip(buckets, mask_seeds):
        mask = gen_freeform_mask(h, w, MaskSpec("freeform", int(bucket), int(mask_seed)))
        if augment:
            mask = augment_mask(mask, seed=int(mask_seed) + 1)
        masks.append(mask)

    gt = np.stack([dataset[i].pixels for i in picks])
    return TrainingBatch(iteration, gt, to_batch(masks), [int(b) for b in buckets])


@dataclass
class EvalCase:
    bucket: str
    gt: np.ndarray        # (1, 3, H, W)
    mask: np.ndarray      # (1, 1, H, W)


def build_eval_set(count: int, seed: int, h: int, w: int, regular: bool = False) -> list:
    """
    `count` cases per hole-ratio bucket (and a "Regular" centered-hole row
    when requested); images are never drawn from the training seeds.
    """
    cases = []
    groups = [(bucket, "freeform") for bucket in range(1, len(config.MASK_BUCKETS) + 1)]
    if regular:
        groups.append((0, "regular_center"))
    for bucket, kind in groups:
        for i in range(count):
            case_seed = EVAL_SEED_OFFSET + seed * DATASET_SEED_STRIDE + bucket * count + i
            image = gen_synthetic_image(h, w, case_seed)
            if kind == "regular_center":
                mask, label = gen_regular_mask(h, w), "Regular"
            else:
                mask = gen_freeform_mask(h, w, MaskSpec(kind, bucket, case_seed))
                label = bucket_label(bucket)
            cases.append(EvalCase(label, image.pixels[None], to_batch([mask])))
    return cases


# ============================================================
# PREFETCHING
# ============================================================

_DONE = object()


class BatchPrefetcher:
    """
    Produce batches for iterations [start, stop) on one background thread.

    The queue is bounded by depth, so the producer runs at most depth
    batches ahead; batches come out in iteration order. A producer error is
    re-raised in the consumer.

    Usage:
        with BatchPrefetcher(make_batch, 0, 100, depth=4) as batches:
            for batch in batches:
                ...
    """

    def __init__(self, make_batch: Callable[[int], TrainingBatch], start: int, stop: int,
                 depth: int = config.TRAIN_PREFETCH_DEPTH):
        self.make_batch = make_batch
        self.start, self.stop = start, stop
        self._queue = queue.Queue(maxsize=max(1, depth))
        self._stop_event = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def __enter__(self) -> BatchPrefetcher:
        self._thread = threading.Thread(target=self._produce, name="batch-prefetch", daemon=True)
        self._thread.start()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    def _put(self, item) -> bool:
        while not self._stop_event.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self) -> None:
        try:
            for iteration in range(self.start, self.stop):
                if not self._put(self.make_batch(iteration)):
                    return
        except Exception as e:
            self._put(e)
            return
        self._put(_DONE)

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is _DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self) -> None:
        self._stop_event.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
