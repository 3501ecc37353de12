"""
Losses - reconstruction, perceptual, style and total-variation terms

  L_1     = L_valid + 6 L_hole
  L_total = L_1 + 0.05 L_perc + 120 L_style + 0.1 L_tv

Perceptual and style terms read features from a frozen FeatureNet (a fixed
seed 3-stage conv stack). Any object with extract(img) -> [Tensor4, ...]
can be passed in its place.

Masks are (n, 1, H, W) with 1 = valid pixel, 0 = hole.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

import config
from autodiff import Tensor4, check_finite, gram, relu, scalar, slice_spatial
from conv_ops import ConvSpec, avg_pool2x2, conv2d
from errors import ConfigurationError, ValidationError
from masks import dilate_hole

logger = logging.getLogger(__name__)


@dataclass
class LossWeights:
    w_hole: float = config.W_HOLE
    w_perc: float = config.W_PERC
    w_style: float = config.W_STYLE
    w_tv: float = config.W_TV


# ============================================================
# FEATURE NETWORK
# ============================================================

class FeatureBackbone(Protocol):
    def extract(self, img: Tensor4) -> list:
        ...


class FeatureNet:
    """
    Frozen stand-in for a pretrained backbone.

    Three stages of 3x3 conv -> relu -> 2x2 average pool with channels
    [16, 32, 64]; one feature tap after every pool. Weights are He-normal
    from a fixed seed and never receive gradients.
    """

    def __init__(self, channels=None, seed: int = config.FEATURE_NET_SEED, in_channels: int = 3):
        self.channels = list(channels or config.FEATURE_NET_CHANNELS)
        self.seed = seed
        self.in_channels = in_channels
        rng = np.random.default_rng(seed)
        self._weights = []
        c_in = in_channels
        for c_out in self.channels:
            std = np.sqrt(2.0 / (c_in * 9))
            w = rng.normal(0.0, std, size=(c_out, c_in, 3, 3))
            self._weights.append((w, np.zeros((1, c_out, 1, 1))))
            c_in = c_out
        self._cast = {}

    @property
    def scale(self) -> int:
        return 2 ** len(self.channels)

    def _stage_weights(self, dtype) -> list:
        key = np.dtype(dtype).name
        if key not in self._cast:
            self._cast[key] = [
                (Tensor4(w.astype(dtype)), Tensor4(b.astype(dtype))) for w, b in self._weights
            ]
        return self._cast[key]

    def extract(self, img: Tensor4) -> list:
        """
        Raises:
            ValidationError: wrong channel count, or h/w not divisible by 8
        """
        if img.c != self.in_channels:
            raise ValidationError(f"FeatureNet expects {self.in_channels} channels, got {img.c}")
        if img.h % self.scale or img.w % self.scale:
            raise ValidationError(
                f"FeatureNet input {img.h}x{img.w} must be divisible by {self.scale}"
            )

        taps = []
        x = img
        for w, b in self._stage_weights(img.dtype):
            spec = ConvSpec.same(3, x.c, w.shape[0])
            x = avg_pool2x2(relu(conv2d(x, w, spec, bias=b)))
            taps.append(x)
        return taps


def feature_extract(img: Tensor4, net: FeatureBackbone) -> list:
    return net.extract(img)


# ============================================================
# LOSS TERMS
# ============================================================

def _check_dims(i_out: Tensor4, i_gt: Tensor4, mask: Tensor4) -> None:
    if i_out.shape != i_gt.shape:
        raise ConfigurationError(f"Output {i_out.shape} and ground truth {i_gt.shape} disagree")
    if (mask.n, mask.h, mask.w) != (i_gt.n, i_gt.h, i_gt.w) or mask.c != 1:
        raise ConfigurationError(f"Mask {mask.shape} does not fit image {i_gt.shape}")


def _hole(mask: Tensor4, dtype) -> Tensor4:
    return Tensor4((1.0 - mask.data).astype(dtype))


def _valid(mask: Tensor4, dtype) -> Tensor4:
    return Tensor4(mask.data.astype(dtype))


def compose(i_out: Tensor4, i_gt: Tensor4, mask: Tensor4) -> Tensor4:
    """Ground truth at valid pixels, network output inside holes."""
    _check_dims(i_out, i_gt, mask)
    if not np.isin(mask.data, (0, 1)).all():
        raise ValidationError("compose needs a binary mask")
    return i_gt * _valid(mask, i_gt.dtype) + i_out * _hole(mask, i_out.dtype)


def loss_hole(i_out: Tensor4, i_gt: Tensor4, mask: Tensor4) -> Tensor4:
    """sum |(1 - M) * (I_out - I_gt)| / N, N = every element of I_gt."""
    _check_dims(i_out, i_gt, mask)
    return ((i_out - i_gt) * _hole(mask, i_out.dtype)).abs().sum() / i_gt.size


def loss_valid(i_out: Tensor4, i_gt: Tensor4, mask: Tensor4) -> Tensor4:
    """sum |M * (I_out - I_gt)| / N."""
    _check_dims(i_out, i_gt, mask)
    return ((i_out - i_gt) * _valid(mask, i_out.dtype)).abs().sum() / i_gt.size


def loss_perceptual(i_out: Tensor4, i_com: Tensor4, i_gt: Tensor4, net: FeatureBackbone,
                    gt_features: Optional[list] = None) -> Tensor4:
    """Mean L1 feature distance to I_gt, summed over taps, for both I_out and I_com."""
    gt_features = gt_features if gt_features is not None else net.extract(i_gt)
    total = None
    for img in (i_out, i_com):
        for feat, ref in zip(net.extract(img), gt_features):
            term = (feat - ref).abs().mean()
            total = term if total is None else total + term
    return total


def loss_style(i_out: Tensor4, i_com: Tensor4, i_gt: Tensor4, net: FeatureBackbone,
               gt_features: Optional[list] = None) -> Tensor4:
    """
    L1 distance between Gram matrices scaled by 1 / (C H W), divided by C^2.

    Both I_out and I_com are compared with I_gt; the batch is averaged.
    """
    gt_features = gt_features if gt_features is not None else net.extract(i_gt)
    gt_grams = [gram(ref, 1.0 / (ref.c * ref.h * ref.w)) for ref in gt_features]
    total = None
    for img in (i_out, i_com):
        for feat, ref_gram in zip(net.extract(img), gt_grams):
            g = gram(feat, 1.0 / (feat.c * feat.h * feat.w))
            term = (g - ref_gram).abs().mean()
            total = term if total is None else total + term
    return total


def dilated_hole_region(mask: np.ndarray) -> np.ndarray:
    """Hole pixels grown by one pixel with a 3x3 square; (n, 1, H, W) in {0, 1}."""
    region = np.empty(mask.shape, np.uint8)
    for b in range(mask.shape[0]):
        region[b, 0] = 1 - dilate_hole(mask[b, 0], 1)
    return region


def loss_tv(i_com: Tensor4, mask: Tensor4) -> Tensor4:
    """
    Total variation over the 1-pixel dilated hole region R.

    A horizontal or vertical neighbour pair counts only when both pixels lie
    in R; the sum is divided by the element count of I_com.
    """
    if (mask.n, mask.h, mask.w) != (i_com.n, i_com.h, i_com.w) or mask.c != 1:
        raise ConfigurationError(f"Mask {mask.shape} does not fit image {i_com.shape}")
    region = dilated_hole_region(mask.data).astype(i_com.dtype)
    h, w = i_com.h, i_com.w
    total = scalar(0.0, dtype=i_com.dtype)

    if w > 1:
        pairs = Tensor4(region[:, :, :, 1:] * region[:, :, :, :-1])
        diff = slice_spatial(i_com, (0, h), (1, w)) - slice_spatial(i_com, (0, h), (0, w - 1))
        total = total + (diff.abs() * pairs).sum()
    if h > 1:
        pairs = Tensor4(region[:, :, 1:, :] * region[:, :, :-1, :])
        diff = slice_spatial(i_com, (1, h), (0, w)) - slice_spatial(i_com, (0, h - 1), (0, w))
        total = total + (diff.abs() * pairs).sum()
    return total / i_com.size


# ============================================================
# SUPERVISION SCHEDULE
# ============================================================

@dataclass
class DecoderLoss:
    l_hole: float = 0.0
    l_valid: float = 0.0
    l_perc: float = 0.0
    l_style: float = 0.0
    l_tv: float = 0.0
    composite: float = 0.0


@dataclass
class LossReport:
    decoders: list = field(default_factory=list)
    total: float = 0.0

    def to_kv(self) -> str:
        parts = []
        for d, entry in enumerate(self.decoders):
            for name in ("l_hole", "l_valid", "l_perc", "l_style", "l_tv", "composite"):
                parts.append(f"d{d}.{name}={getattr(entry, name):.6g}")
        parts.append(f"total={self.total:.6g}")
        return " ".join(parts)


# Terms each decoder is trained with
PLAN_L1 = "l1"
PLAN_L1_PERC = "l1+perc"
PLAN_TOTAL = "total"


def decoder_plan(schedule: str, decoders: int) -> list:
    """
    Per-decoder loss plan for decoders 0..K (None = monitored, not trained).

    coarse-to-fine: L_1 at the recovery decoder, L_1 + perceptual at middle
    decoders, L_total at the last. same: L_total everywhere. none: L_total at
    the last decoder only.
    """
    if schedule not in config.SCHEDULES:
        raise ConfigurationError(f"Unknown schedule '{schedule}', expected one of {config.SCHEDULES}")
    last = decoders - 1
    plan = []
    for d in range(decoders):
        if d == last or schedule == "same":
            plan.append(PLAN_TOTAL)
        elif schedule == "none":
            plan.append(None)
        else:
            plan.append(PLAN_L1_PERC if d >= 1 else PLAN_L1)
    return plan


def supervision_losses(outputs, i_gt: Tensor4, mask: Tensor4, net: FeatureBackbone,
                       weights: Optional[LossWeights] = None, schedule: str = "coarse-to-fine",
                       refinements: Optional[int] = None) -> tuple:
    """
    Sum the scheduled loss of every decoder output.

    Args:
        outputs: DecoderOutputs (or any object with an images list)
        refinements: expected K; checked against the number of outputs

    Returns:
        (LossReport, total Tensor4 of dims 1x1x1x1)

    Raises:
        ConfigurationError: unknown schedule or output count != K + 1
        NumericError: the total is not finite
    """
    weights = weights or LossWeights()
    images = list(outputs.images)
    if not images:
        raise ConfigurationError("supervision_losses needs at least one decoder output")
    if refinements is not None and len(images) != refinements + 1:
        raise ConfigurationError(
            f"Schedule for K={refinements} expects {refinements + 1} outputs, got {len(images)}"
        )
    plan = decoder_plan(schedule, len(images))

    gt_features = None
    if any(p in (PLAN_L1_PERC, PLAN_TOTAL) for p in plan):
        gt_features = net.extract(i_gt)

    report = LossReport()
    total = None
    for i_out, step in zip(images, plan):
        entry = DecoderLoss()
        if step is None:
            detached = i_out.detach()
            entry.l_hole = loss_hole(detached, i_gt, mask).item()
            entry.l_valid = loss_valid(detached, i_gt, mask).item()
            report.decoders.append(entry)
            continue

        l_hole = loss_hole(i_out, i_gt, mask)
        l_valid = loss_valid(i_out, i_gt, mask)
        composite = l_valid + l_hole * weights.w_hole
        entry.l_hole, entry.l_valid = l_hole.item(), l_valid.item()

        if step in (PLAN_L1_PERC, PLAN_TOTAL):
            i_com = compose(i_out, i_gt, mask)
            l_perc = loss_perceptual(i_out, i_com, i_gt, net, gt_features)
            composite = composite + l_perc * weights.w_perc
            entry.l_perc = l_perc.item()
            if step == PLAN_TOTAL:
                l_style = loss_style(i_out, i_com, i_gt, net, gt_features)
                l_tv = loss_tv(i_com, mask)
                composite = composite + l_style * weights.w_style + l_tv * weights.w_tv
                entry.l_style, entry.l_tv = l_style.item(), l_tv.item()

        entry.composite = composite.item()
        report.decoders.append(entry)
        total = composite if total is None else total + composite

    check_finite(total, "total loss")
    report.total = total.item()
    return report, total
