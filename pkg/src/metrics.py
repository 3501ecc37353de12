"""
Metrics - PSNR, SSIM and bucketed evaluation

Evaluation scores the composed image (prediction inside holes, ground
truth elsewhere), clamped to [0, 1].
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np

import config
from errors import ValidationError

logger = logging.getLogger(__name__)

ALL_BUCKETS = "ALL"


def _pixels(img) -> np.ndarray:
    arr = img.pixels if hasattr(img, "pixels") else img
    return np.asarray(arr, dtype=np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"Image dims differ: {a.shape} vs {b.shape}")


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse == 0:
        return config.PSNR_CAP_DB
    return min(config.PSNR_CAP_DB, float(10.0 * np.log10(peak ** 2 / mse)))


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over all channels; identical images give the 100 dB cap."""
    a, b = _pixels(a), _pixels(b)
    _check_pair(a, b)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def hole_psnr(a, b, mask: np.ndarray, peak: float = 1.0) -> float:
    """PSNR over hole pixels (mask == 0) only; no holes gives the cap."""
    a, b = _pixels(a), _pixels(b)
    _check_pair(a, b)
    hole = np.broadcast_to(np.asarray(mask).reshape(a.shape[-2:]) == 0, a.shape)
    if not hole.any():
        return config.PSNR_CAP_DB
    return _psnr_from_mse(float(np.mean((a[hole] - b[hole]) ** 2)), peak)


def _gaussian_window() -> np.ndarray:
    k = cv2.getGaussianKernel(config.SSIM_WINDOW, config.SSIM_SIGMA)
    return np.outer(k, k.transpose())


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: np.ndarray) -> float:
    c1 = (config.SSIM_K1 * 1.0) ** 2
    c2 = (config.SSIM_K2 * 1.0) ** 2
    r = config.SSIM_WINDOW // 2

    def filt(img):
        return cv2.filter2D(img, -1, window)[r:-r, r:-r]

    mu_x, mu_y = filt(x), filt(y)
    mu_x_sq, mu_y_sq, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    sigma_x_sq = filt(x * x) - mu_x_sq
    sigma_y_sq = filt(y * y) - mu_y_sq
    sigma_xy = filt(x * y) - mu_xy

    ssim_map = ((2 * mu_xy + c1) * (2 * sigma_xy + c2)) / (
        (mu_x_sq + mu_y_sq + c1) * (sigma_x_sq + sigma_y_sq + c2)
    )
    return float(ssim_map.mean())


def ssim(a, b) -> float:
    """
    Mean local SSIM, 11x11 Gaussian window (sigma 1.5), dynamic range 1,
    per channel then averaged.

    Raises:
        ValidationError: dims differ, or image smaller than the window
    """
    a, b = _pixels(a), _pixels(b)
    _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < config.SSIM_WINDOW:
        raise ValidationError(
            f"SSIM needs images of at least {config.SSIM_WINDOW}px, got {a.shape[-2:]}"
        )
    window = _gaussian_window()
    return float(np.mean([_ssim_channel(a[c], b[c], window) for c in range(a.shape[0])]))


# ============================================================
# EVALUATION
# ============================================================

@dataclass
class EvalRow:
    bucket: str
    psnr_db: float
    ssim: float
    hole_psnr_db: float
    count: int


def evaluate_set(model, cases: list, decoder_index: int = -1) -> list:
    """
    Score one decoder's composed output per case and average per bucket.

    Args:
        model: anything with predict(image_in, mask, decoder_index) -> (n, 3, H, W)
        cases: objects with bucket, gt (1, 3, H, W) and mask (1, 1, H, W)
        decoder_index: -1 = last refinement decoder, 0 = recovery decoder

    Returns:
        EvalRow per bucket in first-seen order, then the ALL row; [] for no cases
    """
    if not cases:
        return []
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()

    scores = OrderedDict()
    try:
        for case in cases:
            gt, mask = np.asarray(case.gt), np.asarray(case.mask)
            out = np.clip(model.predict(gt * mask, mask, decoder_index), 0.0, 1.0)
            composed = mask * gt + (1.0 - mask) * out
            entry = (psnr(composed[0], gt[0]), ssim(composed[0], gt[0]),
                     hole_psnr(composed[0], gt[0], mask[0, 0]))
            scores.setdefault(case.bucket, []).append(entry)
    finally:
        if was_training and hasattr(model, "train"):
            model.train()

    rows = []
    everything = []
    for bucket, entries in scores.items():
        rows.append(_row(bucket, entries))
        everything.extend(entries)
    rows.append(_row(ALL_BUCKETS, everything))
    return rows


def _row(bucket: str, entries: list) -> EvalRow:
    arr = np.asarray(entries, dtype=np.float64)
    return EvalRow(bucket, float(arr[:, 0].mean()), float(arr[:, 1].mean()),
                   float(arr[:, 2].mean()), len(entries))


def find_row(rows: list, bucket: str) -> Optional[EvalRow]:
    return next((row for row in rows if row.bucket == bucket), None)


def format_table(rows: list) -> str:
    lines = [f"{'bucket':<12}{'PSNR':>10}{'SSIM':>10}{'hole PSNR':>12}{'count':>8}", "-" * 52]
    for row in rows:
        lines.append(f"{row.bucket:<12}{row.psnr_db:>10.2f}{row.ssim:>10.4f}"
                     f"{row.hole_psnr_db:>12.2f}{row.count:>8}")
    return "\n".join(lines)


def to_csv(rows: list) -> str:
    """bucket,psnr,ssim,count rows with hole PSNR appended as a trailing column."""
    lines = ["bucket,psnr,ssim,count,hole_psnr"]
    lines += [f"{row.bucket},{row.psnr_db:.6f},{row.ssim:.6f},{row.count},{row.hole_psnr_db:.6f}"
              for row in rows]
    return "\n".join(lines) + "\n"
