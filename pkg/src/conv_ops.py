"""
Convolution Ops - im2col based conv2d / transposed conv / resampling

Window extraction (im2col) and its adjoint (col2im) loop over the k x k
kernel taps and move whole strided planes at a time, so the per-window
math is a single tensordot/matmul. madf_layers reuses the same helpers
for per-window dynamic kernels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from autodiff import Function, Tensor4, apply_op
from errors import ConfigurationError, NumericError, ValidationError

logger = logging.getLogger(__name__)

PAD_MODES = ("zeros", "edge")


@dataclass(frozen=True)
class ConvSpec:
    """Square k x k convolution with stride s and pad pixels of padding per side."""

    k: int
    s: int
    pad: int
    c_in: int
    c_out: int
    pad_mode: str = "zeros"

    def __post_init__(self):
        errors = []
        if self.k < 1:
            errors.append(f"k must be >= 1 (got {self.k})")
        if self.s < 1:
            errors.append(f"s must be >= 1 (got {self.s})")
        if self.pad < 0:
            errors.append(f"pad must be >= 0 (got {self.pad})")
        if self.c_in < 1 or self.c_out < 1:
            errors.append(f"channels must be >= 1 (got {self.c_in} -> {self.c_out})")
        if self.pad_mode not in PAD_MODES:
            errors.append(f"pad_mode must be one of {PAD_MODES} (got {self.pad_mode!r})")
        if errors:
            raise ConfigurationError("Invalid ConvSpec: " + "; ".join(errors))

    @classmethod
    def same(cls, k: int, c_in: int, c_out: int, s: int = 1, pad_mode: str = "zeros") -> ConvSpec:
        """Padding (k - 1) // 2: keeps size at stride 1, halves even sizes at stride 2."""
        return cls(k=k, s=s, pad=(k - 1) // 2, c_in=c_in, c_out=c_out, pad_mode=pad_mode)

    @property
    def weight_shape(self) -> tuple:
        return (self.c_out, self.c_in, self.k, self.k)

    @property
    def transpose_weight_shape(self) -> tuple:
        return (self.c_in, self.c_out, self.k, self.k)

    def output_hw(self, h: int, w: int) -> tuple:
        nh = (h + 2 * self.pad - self.k) // self.s + 1
        nw = (w + 2 * self.pad - self.k) // self.s + 1
        if h + 2 * self.pad < self.k or w + 2 * self.pad < self.k:
            raise ConfigurationError(
                f"{self.k}x{self.k} kernel does not fit a {h}x{w} input with pad {self.pad}"
            )
        return nh, nw

    def transpose_output_hw(self, h: int, w: int) -> tuple:
        oh = (h - 1) * self.s + self.k - 2 * self.pad
        ow = (w - 1) * self.s + self.k - 2 * self.pad
        if oh < 1 or ow < 1:
            raise ConfigurationError(f"Transposed conv of {h}x{w} yields empty output")
        return oh, ow


# ============================================================
# WINDOW HELPERS
# ============================================================

def pad_input(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    np_mode = "constant" if mode == "zeros" else "edge"
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=np_mode)


def unpad_grad(gp: np.ndarray, pad: int, mode: str, h: int, w: int) -> np.ndarray:
    """Adjoint of pad_input: crop, and for edge padding fold replicas onto the border."""
    if pad == 0:
        return gp
    if mode == "zeros":
        return gp[:, :, pad:pad + h, pad:pad + w].copy()

    rows = gp[:, :, pad:pad + h, :].copy()
    rows[:, :, 0, :] += gp[:, :, :pad, :].sum(axis=2)
    rows[:, :, -1, :] += gp[:, :, pad + h:, :].sum(axis=2)
    out = rows[:, :, :, pad:pad + w].copy()
    out[:, :, :, 0] += rows[:, :, :, :pad].sum(axis=3)
    out[:, :, :, -1] += rows[:, :, :, pad + w:].sum(axis=3)
    return out


def im2col(xp: np.ndarray, k: int, s: int, nh: int, nw: int) -> np.ndarray:
    """Padded input (n, c, Hp, Wp) -> windows (n, c, k, k, nh, nw)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, nh, nw), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, a, b] = xp[:, :, a:a + s * nh:s, b:b + s * nw:s]
    return cols


def col2im(cols: np.ndarray, padded_hw: tuple, s: int) -> np.ndarray:
    """Scatter-add windows (n, c, k, k, nh, nw) back onto a (n, c, Hp, Wp) canvas."""
    n, c, k, _, nh, nw = cols.shape
    out = np.zeros((n, c) + tuple(padded_hw), dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            out[:, :, a:a + s * nh:s, b:b + s * nw:s] += cols[:, :, a, b]
    return out


# ============================================================
# CONV2D
# ============================================================

class Conv2d(Function):
    @staticmethod
    def forward(ctx, x, w, b=None, *, spec):
        h, wd = x.shape[2:]
        nh, nw = spec.output_hw(h, wd)
        xp = pad_input(x, spec.pad, spec.pad_mode)
        cols = im2col(xp, spec.k, spec.s, nh, nw)
        ctx.cols, ctx.w, ctx.spec = cols, w, spec
        ctx.in_hw, ctx.padded_hw = (h, wd), xp.shape[2:]
        ctx.has_bias = b is not None

        out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        if b is not None:
            out = out + b
        return np.ascontiguousarray(out)

    @staticmethod
    def backward(ctx, grad):
        spec = ctx.spec
        dx = dw = None
        if ctx.needs_input_grad[0]:
            dcols = np.tensordot(grad, ctx.w, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
            dxp = col2im(dcols, ctx.padded_hw, spec.s)
            dx = unpad_grad(dxp, spec.pad, spec.pad_mode, *ctx.in_hw)
        if ctx.needs_input_grad[1]:
            dw = np.tensordot(grad, ctx.cols, axes=([0, 2, 3], [0, 4, 5]))
        if not ctx.has_bias:
            return dx, dw
        db = grad.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        return dx, dw, db


def _check_bias(bias: Optional[Tensor4], c_out: int, op: str) -> None:
    if bias is not None and bias.shape != (1, c_out, 1, 1):
        raise ConfigurationError(f"{op} bias must have shape (1, {c_out}, 1, 1), got {bias.shape}")


def conv2d(x: Tensor4, w: Tensor4, spec: ConvSpec, bias: Optional[Tensor4] = None) -> Tensor4:
    """
    Cross-correlate x with weights (c_out, c_in, k, k).

    Returns:
        Tensor4 of dims (n, c_out, N_H, N_W)

    Raises:
        ConfigurationError: channel or weight dims disagree with spec
        NumericError: x holds non-finite values
    """
    if x.c != spec.c_in:
        raise ConfigurationError(f"conv2d expects {spec.c_in} input channels, got {x.c}")
    if w.shape != spec.weight_shape:
        raise ConfigurationError(f"conv2d weight must be {spec.weight_shape}, got {w.shape}")
    _check_bias(bias, spec.c_out, "conv2d")
    if not np.isfinite(x.data).all():
        raise NumericError("conv2d received non-finite input")

    if bias is None:
        return apply_op(Conv2d, x, w, spec=spec)
    return apply_op(Conv2d, x, w, bias, spec=spec)


class Conv2dTranspose(Function):
    @staticmethod
    def forward(ctx, x, w, b=None, *, spec):
        n, _, h, wd = x.shape
        oh, ow = spec.transpose_output_hw(h, wd)
        padded_hw = ((h - 1) * spec.s + spec.k, (wd - 1) * spec.s + spec.k)
        ctx.x, ctx.w, ctx.spec = x, w, spec
        ctx.in_hw, ctx.out_hw = (h, wd), (oh, ow)
        ctx.has_bias = b is not None

        cols = np.tensordot(x, w, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        out = col2im(cols, padded_hw, spec.s)
        out = out[:, :, spec.pad:spec.pad + oh, spec.pad:spec.pad + ow]
        if b is not None:
            out = out + b
        return np.ascontiguousarray(out)

    @staticmethod
    def backward(ctx, grad):
        spec = ctx.spec
        h, wd = ctx.in_hw
        gp = pad_input(grad, spec.pad, "zeros")
        cols = im2col(gp, spec.k, spec.s, h, wd)
        dx = dw = None
        if ctx.needs_input_grad[0]:
            dx = np.tensordot(cols, ctx.w, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
            dx = np.ascontiguousarray(dx)
        if ctx.needs_input_grad[1]:
            dw = np.tensordot(ctx.x, cols, axes=([0, 2, 3], [0, 4, 5]))
        if not ctx.has_bias:
            return dx, dw
        db = grad.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        return dx, dw, db


def conv2d_transpose(x: Tensor4, w: Tensor4, spec: ConvSpec,
                     bias: Optional[Tensor4] = None) -> Tensor4:
    """
    Transposed convolution with weights (c_in, c_out, k, k).

    Output size is (H - 1) * s + k - 2 * pad, which doubles H for k=4, s=2, pad=1.
    Its data gradient is a conv2d of the incoming gradient with the same weights.
    """
    if x.c != spec.c_in:
        raise ConfigurationError(f"conv2d_transpose expects {spec.c_in} input channels, got {x.c}")
    if w.shape != spec.transpose_weight_shape:
        raise ConfigurationError(
            f"conv2d_transpose weight must be {spec.transpose_weight_shape}, got {w.shape}"
        )
    if spec.pad_mode != "zeros":
        raise ConfigurationError("conv2d_transpose supports zero padding only")
    _check_bias(bias, spec.c_out, "conv2d_transpose")
    if not np.isfinite(x.data).all():
        raise NumericError("conv2d_transpose received non-finite input")

    if bias is None:
        return apply_op(Conv2dTranspose, x, w, spec=spec)
    return apply_op(Conv2dTranspose, x, w, bias, spec=spec)


# ============================================================
# RESAMPLING
# ============================================================

class UpsampleNearest2x(Function):
    @staticmethod
    def forward(ctx, x):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    @staticmethod
    def backward(ctx, grad):
        n, c, h2, w2 = grad.shape
        return (grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)


def upsample_nearest2x(x: Tensor4) -> Tensor4:
    """Replicate every pixel into a 2x2 block."""
    return apply_op(UpsampleNearest2x, x)


class AvgPool2x2(Function):
    @staticmethod
    def forward(ctx, x):
        n, c, h, w = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    @staticmethod
    def backward(ctx, grad):
        up = grad.repeat(2, axis=2).repeat(2, axis=3)
        return (up * grad.dtype.type(0.25),)


def avg_pool2x2(x: Tensor4) -> Tensor4:
    """Non-overlapping 2x2 average pooling; h and w must be even."""
    if x.h % 2 or x.w % 2:
        raise ValidationError(f"avg_pool2x2 needs even spatial dims, got {x.h}x{x.w}")
    return apply_op(AvgPool2x2, x)
