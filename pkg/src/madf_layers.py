"""
MADF Layers - mask-aware dynamic filtering and point-wise normalization

Encoder side: the mask branch turns mask features into one convolution
kernel per output window (a KernelField), and madf_conv filters each
window of the image features with its own kernel.

Decoder side: batch_norm without affine, and point_norm, whose per-point
scale and bias are predicted from the previous decoder's features.

KernelField layout: for batch item b and window (i, j), the D = c_in*k*k*c_out
values theta[b, :, i, j] are ordered (c_in, k, k, c_out), c_out fastest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

import config
from autodiff import Function, Tensor4, apply_op, relu
from conv_ops import ConvSpec, col2im, conv2d, im2col, pad_input, unpad_grad
from errors import ConfigurationError

logger = logging.getLogger(__name__)


# ============================================================
# KERNEL FIELDS
# ============================================================

def kernel_dim(spec: ConvSpec) -> int:
    """D = c_in * k * k * c_out (weights only, no bias)."""
    return spec.c_in * spec.k * spec.k * spec.c_out


@dataclass
class KernelField:
    """Per-window kernels: tensor (n, D, N_H, N_W) generated for spec."""

    tensor: Tensor4
    spec: ConvSpec

    def __post_init__(self):
        d = kernel_dim(self.spec)
        if self.tensor.c != d:
            raise ConfigurationError(
                f"KernelField depth {self.tensor.c} != c_in*k*k*c_out = {d} for {self.spec}"
            )

    @property
    def dims(self) -> tuple:
        """(N_H, N_W, D) per batch item."""
        return (self.tensor.h, self.tensor.w, self.tensor.c)

    @property
    def batch(self) -> int:
        return self.tensor.n

    def window_kernels(self, item: int = 0) -> np.ndarray:
        """Kernels of one batch item as (N_H, N_W, c_out, c_in, k, k), conv2d weight layout."""
        s = self.spec
        nh, nw, _ = self.dims
        theta = self.tensor.data[item].reshape(s.c_in, s.k, s.k, s.c_out, nh, nw)
        return theta.transpose(4, 5, 3, 0, 1, 2)


def constant_kernel_field(weights: np.ndarray, spec: ConvSpec, n: int, nh: int, nw: int,
                          requires_grad: bool = False) -> KernelField:
    """Field repeating one conv2d weight (c_out, c_in, k, k) at every window."""
    if weights.shape != spec.weight_shape:
        raise ConfigurationError(f"weights must be {spec.weight_shape}, got {weights.shape}")
    flat = weights.transpose(1, 2, 3, 0).reshape(1, -1, 1, 1)
    data = np.broadcast_to(flat, (n, flat.shape[1], nh, nw)).copy()
    return KernelField(Tensor4(data, requires_grad=requires_grad), spec)


# ============================================================
# PARAMETER BUNDLES
# ============================================================

@dataclass
class MadfLayerParams:
    """Mask branch of one encoder level: k x k mask conv, then 1x1 kernel generator."""

    mask_w: Tensor4   # (C_m^l, C_m^{l-1}, k, k)
    mask_b: Tensor4   # (1, C_m^l, 1, 1)
    gen_w: Tensor4    # (D, C_m^l, 1, 1)
    gen_b: Tensor4    # (1, D, 1, 1)

    def mask_spec(self, spec: ConvSpec) -> ConvSpec:
        c_out, c_in = self.mask_w.shape[:2]
        return ConvSpec(k=spec.k, s=spec.s, pad=spec.pad, c_in=c_in, c_out=c_out, pad_mode="edge")

    def gen_spec(self) -> ConvSpec:
        d, c_m = self.gen_w.shape[:2]
        return ConvSpec(k=1, s=1, pad=0, c_in=c_m, c_out=d)


@dataclass
class PnParams:
    """Guide projection and the scale/bias heads of point-wise normalization (all 3x3)."""

    proj_w: Tensor4    # (latent, guide_c, 3, 3)
    proj_b: Tensor4
    scale_w: Tensor4   # (target_c, latent, 3, 3)
    scale_b: Tensor4
    bias_w: Tensor4    # (target_c, latent, 3, 3)
    bias_b: Tensor4

    @property
    def latent(self) -> int:
        return self.proj_w.shape[0]

    @property
    def guide_channels(self) -> int:
        return self.proj_w.shape[1]

    @property
    def target_channels(self) -> int:
        return self.scale_w.shape[0]


@dataclass
class BnState:
    """Running per-channel statistics; no learned affine."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = config.BN_MOMENTUM
    eps: float = config.NORM_EPS

    @classmethod
    def create(cls, channels: int, dtype=np.float64) -> BnState:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]


# ============================================================
# MASK BRANCH + DYNAMIC CONVOLUTION
# ============================================================

def mask_branch_step(m_prev: Tensor4, params: MadfLayerParams, spec: ConvSpec) -> tuple:
    """
    One level of the mask branch.

    Args:
        m_prev: mask features m^{l-1} (level 0: the binary mask, 1 channel)
        params: mask conv + kernel generator weights
        spec: the image-branch ConvSpec the kernels are generated for

    Returns:
        (m_next, KernelField): m^l = relu(conv_kxk(m^{l-1})) and theta = conv_1x1(m^l)

    Raises:
        ConfigurationError: params do not match spec
    """
    d = kernel_dim(spec)
    if params.gen_w.shape[0] != d:
        raise ConfigurationError(
            f"Kernel generator emits {params.gen_w.shape[0]} values, image branch needs D={d}"
        )
    if params.mask_w.shape[2] != spec.k:
        raise ConfigurationError(
            f"Mask conv is {params.mask_w.shape[2]}x{params.mask_w.shape[2]}, image branch is {spec.k}x{spec.k}"
        )

    m_next = relu(conv2d(m_prev, params.mask_w, params.mask_spec(spec), bias=params.mask_b))
    theta = conv2d(m_next, params.gen_w, params.gen_spec(), bias=params.gen_b)
    return m_next, KernelField(theta, spec)


class MadfConv(Function):
    @staticmethod
    def forward(ctx, x, theta, *, spec):
        n, _, h, w = x.shape
        nh, nw = spec.output_hw(h, w)
        p = spec.c_in * spec.k * spec.k
        xp = pad_input(x, spec.pad, spec.pad_mode)
        cols = im2col(xp, spec.k, spec.s, nh, nw)

        # (n, HW, 1, P) @ (n, HW, P, c_out): one small matmul per window
        windows = cols.reshape(n, p, nh * nw).transpose(0, 2, 1)[:, :, None, :]
        kernels = theta.reshape(n, p, spec.c_out, nh * nw).transpose(0, 3, 1, 2)
        ctx.windows, ctx.kernels, ctx.spec = windows, kernels, spec
        ctx.in_hw, ctx.padded_hw, ctx.out_hw = (h, w), xp.shape[2:], (nh, nw)

        out = np.matmul(windows, kernels)[:, :, 0, :]
        return np.ascontiguousarray(out.transpose(0, 2, 1).reshape(n, spec.c_out, nh, nw))

    @staticmethod
    def backward(ctx, grad):
        spec = ctx.spec
        n = grad.shape[0]
        nh, nw = ctx.out_hw
        p = spec.c_in * spec.k * spec.k
        g = grad.reshape(n, spec.c_out, nh * nw).transpose(0, 2, 1)[:, :, :, None]

        dx = dtheta = None
        if ctx.needs_input_grad[0]:
            dwin = np.matmul(ctx.kernels, g)[:, :, :, 0]
            dcols = dwin.transpose(0, 2, 1).reshape(n, spec.c_in, spec.k, spec.k, nh, nw)
            dxp = col2im(dcols, ctx.padded_hw, spec.s)
            dx = unpad_grad(dxp, spec.pad, spec.pad_mode, *ctx.in_hw)
        if ctx.needs_input_grad[1]:
            dk = np.matmul(ctx.windows.transpose(0, 1, 3, 2), g.transpose(0, 1, 3, 2))
            dtheta = np.ascontiguousarray(dk.transpose(0, 2, 3, 1)).reshape(n, -1, nh, nw)
        return dx, dtheta


def madf_conv(e_prev: Tensor4, theta: KernelField, spec: ConvSpec) -> Tensor4:
    """
    Filter every window of e_prev with its own kernel from theta (no bias).

    Differentiable with respect to both e_prev and theta, so the mask
    branch is trained through the dynamic path.

    Raises:
        ConfigurationError: theta was generated for another spec, batch or window grid
    """
    if e_prev.c != spec.c_in:
        raise ConfigurationError(f"madf_conv expects {spec.c_in} input channels, got {e_prev.c}")
    if theta.spec != spec:
        raise ConfigurationError(f"KernelField was generated for {theta.spec}, not {spec}")
    if theta.batch != e_prev.n:
        raise ConfigurationError(f"KernelField batch {theta.batch} != input batch {e_prev.n}")
    nh, nw = spec.output_hw(e_prev.h, e_prev.w)
    if theta.dims[:2] != (nh, nw):
        raise ConfigurationError(f"KernelField covers {theta.dims[:2]} windows, input gives {(nh, nw)}")
    return apply_op(MadfConv, e_prev, theta.tensor, spec=spec)


def channel_lift(e: Tensor4, weights: Tensor4, bias: Optional[Tensor4] = None) -> Tensor4:
    """u = relu(conv_1x1(e)): raise channels, keep spatial dims."""
    c_out, c_in = weights.shape[:2]
    spec = ConvSpec(k=1, s=1, pad=0, c_in=c_in, c_out=c_out)
    return relu(conv2d(e, weights, spec, bias=bias))


# ============================================================
# NORMALIZATION
# ============================================================

class BatchNorm(Function):
    @staticmethod
    def forward(ctx, x, *, state, training):
        dtype = x.dtype.type
        eps = dtype(state.eps)
        ctx.training = training
        if training:
            mean = x.mean(axis=(0, 2, 3), keepdims=True)
            var = x.var(axis=(0, 2, 3), keepdims=True)
            count = x.size // x.shape[1]
            invstd = 1.0 / np.sqrt(var + eps)
            xhat = (x - mean) * invstd
            ctx.xhat, ctx.invstd, ctx.count = xhat, invstd, count

            m = state.momentum
            unbiased = var.reshape(-1) * (count / (count - 1) if count > 1 else 1.0)
            state.running_mean[:] = (1 - m) * state.running_mean + m * mean.reshape(-1)
            state.running_var[:] = (1 - m) * state.running_var + m * unbiased
            return xhat

        mean = state.running_mean.astype(x.dtype).reshape(1, -1, 1, 1)
        var = state.running_var.astype(x.dtype).reshape(1, -1, 1, 1)
        invstd = 1.0 / np.sqrt(var + eps)
        ctx.invstd = invstd
        return (x - mean) * invstd

    @staticmethod
    def backward(ctx, grad):
        if not ctx.training:
            return (grad * ctx.invstd,)
        xhat, invstd, count = ctx.xhat, ctx.invstd, ctx.count
        g_sum = grad.sum(axis=(0, 2, 3), keepdims=True)
        gx_sum = (grad * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return ((invstd / count) * (count * grad - g_sum - xhat * gx_sum),)


def batch_norm(x: Tensor4, state: BnState, training: bool) -> Tensor4:
    """
    Per-channel (x - mu) / sqrt(var + eps).

    Training mode normalizes with batch statistics and updates the running
    statistics; eval mode normalizes with the running statistics.
    """
    if state.channels != x.c:
        raise ConfigurationError(f"BnState tracks {state.channels} channels, input has {x.c}")
    return apply_op(BatchNorm, x, state=state, training=training)


def batch_norm_affine(x: Tensor4, state: BnState, gamma: Tensor4, beta: Tensor4,
                      training: bool) -> Tensor4:
    """Plain BN with a learned per-channel affine (the non-PN decoder variant)."""
    return batch_norm(x, state, training) * gamma + beta


def point_norm(x: Tensor4, guide: Tensor4, params: PnParams, bn: BnState,
               training: bool) -> Tensor4:
    """
    y = alpha(guide) * batch_norm(x) + beta(guide), elementwise.

    guide -> 3x3 proj -> relu -> {3x3 scale head, 3x3 bias head}; both heads
    produce tensors with x's full dims.

    Raises:
        ConfigurationError: guide and x differ in batch or spatial dims
    """
    if (guide.n, guide.h, guide.w) != (x.n, x.h, x.w):
        raise ConfigurationError(
            f"point_norm guide {guide.shape} does not match input {x.shape} spatially"
        )
    if params.guide_channels != guide.c or params.target_channels != x.c:
        raise ConfigurationError(
            f"PnParams map {params.guide_channels} -> {params.target_channels} channels, "
            f"got guide {guide.c} and input {x.c}"
        )

    proj_spec = ConvSpec.same(3, params.guide_channels, params.latent)
    head_spec = ConvSpec.same(3, params.latent, params.target_channels)
    latent = relu(conv2d(guide, params.proj_w, proj_spec, bias=params.proj_b))
    alpha = conv2d(latent, params.scale_w, head_spec, bias=params.scale_b)
    beta = conv2d(latent, params.bias_w, head_spec, bias=params.bias_b)
    return batch_norm(x, bn, training) * alpha + beta
