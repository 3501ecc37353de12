"""
Model - encoder, recovery decoder and refinement decoders

The encoder runs L mask-aware levels: the mask branch generates one kernel
per window, the image branch filters with those kernels, and a 1x1 lift
feeds each level to the decoders as a skip.

Decoder chain D_0 (recovery) ... D_K (refinements): D_k is guided by the
per-level features of D_{k-1}. Every decoder ends in its own 3x3 head
producing a full-resolution image.

Parameters live in one ordered dict keyed by dotted names
(enc.1.gen_w, rec.3.up_w, ref2.1.pn_scale_b, ...), which is also the
checkpoint layout.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional

import cv2
import numpy as np

import config
from autodiff import Tensor4, concat_channels, leaky_relu, relu
from conv_ops import ConvSpec, conv2d, conv2d_transpose, im2col, pad_input, upsample_nearest2x
from errors import ConfigurationError, ValidationError
from madf_layers import (
    BnState,
    MadfLayerParams,
    PnParams,
    batch_norm_affine,
    channel_lift,
    kernel_dim,
    madf_conv,
    mask_branch_step,
    point_norm,
)

logger = logging.getLogger(__name__)

PRESETS = ("desk", "full", "micro")

# Transposed conv that doubles resolution in the recovery decoder
UP_KERNEL, UP_STRIDE, UP_PAD = 4, 2, 1


def decoder_width(level: int) -> int:
    """min(512, 64 * 2^(level-1)); level 0 gives 32."""
    return min(config.DECODER_MAX_WIDTH, config.DECODER_BASE_WIDTH * 2 ** level // 2)


def image_channels(level: int) -> int:
    return min(config.IMAGE_CHANNEL_CAP, config.IMAGE_CHANNEL_BASE * 2 ** level)


# ============================================================
# CONFIGURATION
# ============================================================

@dataclass
class ModelConfig:
    """
    Network ladder.

    Lists indexed by level: kernel_sizes, strides, mask_channels and
    image_channels cover levels 1..L; decoder_widths covers levels 0..L
    (decoder_widths[l] is also C_u^l, the lifted skip width).
    """

    levels: int
    kernel_sizes: list
    strides: list
    mask_channels: list
    image_channels: list
    decoder_widths: list
    refinements: int = config.DEFAULT_REFINEMENTS
    pn_enabled: bool = True
    pn_latent: int = config.PN_LATENT_WIDTH
    image_size: tuple = (config.DESK_IMAGE_SIZE, config.DESK_IMAGE_SIZE)
    in_channels: int = 3
    out_channels: int = 3
    name: str = "custom"

    @classmethod
    def preset(cls, name: str, refinements: Optional[int] = None,
               pn_enabled: Optional[bool] = None) -> ModelConfig:
        """
        Build a named preset.

        desk:  L=4, kernels [7,5,3,3], 64x64
        full:  L=7, kernels [7,5,5,3,3,3,3], 256x256
        micro: L=2, kernels [3,3], narrow channels, 8x8 (gradient checks)
        """
        if name == "desk" or name == "full":
            kernels = config.DESK_KERNELS if name == "desk" else config.FULL_KERNELS
            size = config.DESK_IMAGE_SIZE if name == "desk" else config.FULL_IMAGE_SIZE
            levels = len(kernels)
            cfg = cls(
                levels=levels,
                kernel_sizes=list(kernels),
                strides=[2] * levels,
                mask_channels=[config.MASK_CHANNELS] * levels,
                image_channels=[image_channels(l) for l in range(1, levels + 1)],
                decoder_widths=[decoder_width(l) for l in range(levels + 1)],
                image_size=(size, size),
                name=name,
            )
        elif name == "micro":
            cfg = cls(
                levels=2,
                kernel_sizes=[3, 3],
                strides=[2, 2],
                mask_channels=[4, 4],
                image_channels=[4, 8],
                decoder_widths=[4, 4, 8],
                pn_latent=4,
                image_size=(8, 8),
                name=name,
            )
        else:
            raise ConfigurationError(f"Unknown preset '{name}', expected one of {PRESETS}")

        if refinements is not None:
            cfg.refinements = refinements
        if pn_enabled is not None:
            cfg.pn_enabled = pn_enabled
        cfg.validate()
        return cfg

    def validate(self) -> None:
        """Raise ConfigurationError listing every inconsistency."""
        errors = []
        L = self.levels
        if L < 2:
            errors.append(f"levels must be >= 2 (got {L})")
        if self.refinements < 0:
            errors.append(f"refinements must be >= 0 (got {self.refinements})")
        for name in ("kernel_sizes", "strides", "mask_channels", "image_channels"):
            if len(getattr(self, name)) != L:
                errors.append(f"{name} needs {L} entries (got {len(getattr(self, name))})")
        if len(self.decoder_widths) != L + 1:
            errors.append(f"decoder_widths needs {L + 1} entries (got {len(self.decoder_widths)})")
        if any(s != 2 for s in self.strides):
            errors.append(f"every stride must be 2 (got {self.strides})")
        if any(k < 1 for k in self.kernel_sizes):
            errors.append(f"kernel sizes must be >= 1 (got {self.kernel_sizes})")
        channels = list(self.mask_channels) + list(self.image_channels) + list(self.decoder_widths)
        if any(c < 1 for c in channels) or self.pn_latent < 1:
            errors.append("channel counts must be >= 1")
        if errors:
            raise ConfigurationError("Invalid ModelConfig: " + "; ".join(errors))

        self.check_input(*self.image_size)

    def check_input(self, h: int, w: int) -> None:
        """
        Raises:
            ConfigurationError: dims not divisible by 2^L, or a kernel larger
                than the feature map it slides over
        """
        scale = 2 ** self.levels
        if h % scale or w % scale:
            raise ConfigurationError(f"Input {h}x{w} is not divisible by 2^L = {scale}")
        for l in range(1, self.levels + 1):
            side = min(h, w) // 2 ** (l - 1)
            if self.kernel_sizes[l - 1] > side:
                raise ConfigurationError(
                    f"Level {l} kernel {self.kernel_sizes[l - 1]} exceeds its {side}px feature map"
                )

    def encoder_spec(self, level: int) -> ConvSpec:
        """Image-branch ConvSpec of level l (1..L)."""
        c_in = self.in_channels if level == 1 else self.image_channels[level - 2]
        return ConvSpec.same(self.kernel_sizes[level - 1], c_in, self.image_channels[level - 1],
                             s=self.strides[level - 1])

    def mask_in_channels(self, level: int) -> int:
        return 1 if level == 1 else self.mask_channels[level - 2]

    def skip_channels(self, level: int) -> int:
        """Channels of u^l; u^0 is the input image concatenated with the mask."""
        return self.in_channels + 1 if level == 0 else self.decoder_widths[level]

    def output_head(self) -> ConvSpec:
        return ConvSpec.same(3, self.decoder_widths[0], self.out_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


# ============================================================
# PARAMETER LAYOUT
# ============================================================

def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Every learnable tensor's name and dims, in initialization order."""
    shapes = OrderedDict()
    for l in range(1, cfg.levels + 1):
        spec = cfg.encoder_spec(l)
        c_m, k = cfg.mask_channels[l - 1], spec.k
        d = kernel_dim(spec)
        c_u = cfg.skip_channels(l)
        shapes[f"enc.{l}.mask_w"] = (c_m, cfg.mask_in_channels(l), k, k)
        shapes[f"enc.{l}.mask_b"] = (1, c_m, 1, 1)
        shapes[f"enc.{l}.gen_w"] = (d, c_m, 1, 1)
        shapes[f"enc.{l}.gen_b"] = (1, d, 1, 1)
        shapes[f"enc.{l}.lift_w"] = (c_u, spec.c_out, 1, 1)
        shapes[f"enc.{l}.lift_b"] = (1, c_u, 1, 1)

    widths = cfg.decoder_widths
    for l in range(cfg.levels, 0, -1):
        c_hi, c_lo = widths[l], widths[l - 1]
        shapes[f"rec.{l}.up_w"] = (c_hi, c_lo, UP_KERNEL, UP_KERNEL)
        shapes[f"rec.{l}.up_b"] = (1, c_lo, 1, 1)
        shapes[f"rec.{l}.conv_w"] = (c_lo, c_lo + cfg.skip_channels(l - 1), 3, 3)
        shapes[f"rec.{l}.conv_b"] = (1, c_lo, 1, 1)
    shapes["rec.head_w"] = (cfg.out_channels, widths[0], 3, 3)
    shapes["rec.head_b"] = (1, cfg.out_channels, 1, 1)

    for k in range(1, cfg.refinements + 1):
        for l in range(cfg.levels, 0, -1):
            c_hi, c_lo = widths[l], widths[l - 1]
            prefix = f"ref{k}.{l}"
            shapes[f"{prefix}.conv_w"] = (c_lo, c_hi + c_lo, 3, 3)
            shapes[f"{prefix}.conv_b"] = (1, c_lo, 1, 1)
            if cfg.pn_enabled:
                latent = cfg.pn_latent
                shapes[f"{prefix}.pn_proj_w"] = (latent, c_lo, 3, 3)
                shapes[f"{prefix}.pn_proj_b"] = (1, latent, 1, 1)
                shapes[f"{prefix}.pn_scale_w"] = (c_lo, latent, 3, 3)
                shapes[f"{prefix}.pn_scale_b"] = (1, c_lo, 1, 1)
                shapes[f"{prefix}.pn_bias_w"] = (c_lo, latent, 3, 3)
                shapes[f"{prefix}.pn_bias_b"] = (1, c_lo, 1, 1)
            else:
                shapes[f"{prefix}.bn_gamma"] = (1, c_lo, 1, 1)
                shapes[f"{prefix}.bn_beta"] = (1, c_lo, 1, 1)
        shapes[f"ref{k}.head_w"] = (cfg.out_channels, widths[0], 3, 3)
        shapes[f"ref{k}.head_b"] = (1, cfg.out_channels, 1, 1)
    return shapes


def _initial_value(name: str, shape: tuple, rng: np.random.Generator, dtype) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("pn_scale_b", "bn_gamma"):
        return np.ones(shape, dtype=dtype)
    if leaf.endswith("_b") or leaf == "bn_beta":
        return np.zeros(shape, dtype=dtype)
    return rng.normal(0.0, config.INIT_STD, size=shape).astype(dtype)


@dataclass
class RecoveryBlockParams:
    up_w: Tensor4
    up_b: Tensor4
    conv_w: Tensor4
    conv_b: Tensor4


@dataclass
class RefineBlockParams:
    conv_w: Tensor4
    conv_b: Tensor4
    pn: Optional[PnParams] = None
    gamma: Optional[Tensor4] = None
    beta: Optional[Tensor4] = None


class Model:
    """Parameters, normalization state and train/eval mode of one network."""

    def __init__(self, cfg: ModelConfig, params: "OrderedDict[str, Tensor4]",
                 bn_states: "OrderedDict[str, BnState]"):
        self.config = cfg
        self.params = params
        self.bn_states = bn_states
        self.training = True

    def train(self) -> Model:
        self.training = True
        return self

    def eval(self) -> Model:
        self.training = False
        return self

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def madf_params(self, level: int) -> MadfLayerParams:
        p = self.params
        return MadfLayerParams(
            mask_w=p[f"enc.{level}.mask_w"], mask_b=p[f"enc.{level}.mask_b"],
            gen_w=p[f"enc.{level}.gen_w"], gen_b=p[f"enc.{level}.gen_b"],
        )

    def recovery_params(self, level: int) -> RecoveryBlockParams:
        p = self.params
        return RecoveryBlockParams(
            up_w=p[f"rec.{level}.up_w"], up_b=p[f"rec.{level}.up_b"],
            conv_w=p[f"rec.{level}.conv_w"], conv_b=p[f"rec.{level}.conv_b"],
        )

    def refine_params(self, k: int, level: int) -> RefineBlockParams:
        p = self.params
        prefix = f"ref{k}.{level}"
        block = RefineBlockParams(conv_w=p[f"{prefix}.conv_w"], conv_b=p[f"{prefix}.conv_b"])
        if self.config.pn_enabled:
            block.pn = PnParams(
                proj_w=p[f"{prefix}.pn_proj_w"], proj_b=p[f"{prefix}.pn_proj_b"],
                scale_w=p[f"{prefix}.pn_scale_w"], scale_b=p[f"{prefix}.pn_scale_b"],
                bias_w=p[f"{prefix}.pn_bias_w"], bias_b=p[f"{prefix}.pn_bias_b"],
            )
        else:
            block.gamma, block.beta = p[f"{prefix}.bn_gamma"], p[f"{prefix}.bn_beta"]
        return block

    def head(self, decoder: int) -> tuple:
        prefix = "rec" if decoder == 0 else f"ref{decoder}"
        return self.params[f"{prefix}.head_w"], self.params[f"{prefix}.head_b"]

    def predict(self, image_in: np.ndarray, mask: np.ndarray, decoder_index: int = -1) -> np.ndarray:
        """
        Inference without a tape; returns one decoder's output clamped to [0, 1].

        Args:
            image_in: (n, 3, H, W) damaged image, holes zeroed
            mask: (n, 1, H, W) binary mask, 1 = valid
            decoder_index: 0 = recovery, K = last refinement, -1 = last
        """
        dtype = self.dtype
        outputs = forward_full(self, Tensor4(image_in, dtype=dtype), Tensor4(mask, dtype=dtype))
        return np.clip(outputs.images[decoder_index].data, 0.0, 1.0)


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """
    Initialize every parameter from seed: weights normal(0, INIT_STD),
    biases 0, point-norm scale biases and BN gammas 1.

    Raises:
        ConfigurationError: invalid ladder
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        params[name] = Tensor4(_initial_value(name, shape, rng, dtype), requires_grad=True)

    bn_states = OrderedDict()
    for k in range(1, cfg.refinements + 1):
        for l in range(cfg.levels, 0, -1):
            bn_states[f"ref{k}.{l}.bn"] = BnState.create(cfg.decoder_widths[l - 1], dtype=dtype)

    model = Model(cfg, params, bn_states)
    logger.debug(f"Built {cfg.name} model: L={cfg.levels} K={cfg.refinements} "
                 f"pn={cfg.pn_enabled} params={model.num_parameters():,}")
    return model


# ============================================================
# FORWARD PASS
# ============================================================

@dataclass
class EncoderState:
    """Per-level mask features m^l, image features e^l, lifted skips u^l and kernels."""

    masks: list = field(default_factory=list)
    images: list = field(default_factory=list)
    lifted: list = field(default_factory=list)
    kernels: list = field(default_factory=list)
    skip0: Optional[Tensor4] = None

    def m(self, level: int) -> Tensor4:
        return self.masks[level - 1]

    def e(self, level: int) -> Tensor4:
        return self.images[level - 1]

    def u(self, level: int) -> Tensor4:
        return self.skip0 if level == 0 else self.lifted[level - 1]


@dataclass
class DecoderOutputs:
    """images[d] is decoder d's full-resolution output; features[d][l] its level-l map."""

    images: list
    features: list

    @property
    def recovery(self) -> Tensor4:
        return self.images[0]

    @property
    def refinements(self) -> list:
        return self.images[1:]

    def __len__(self) -> int:
        return len(self.images)


def check_binary_mask(mask: Tensor4) -> None:
    if not np.isin(mask.data, (0, 1)).all():
        raise ValidationError("Mask must be binary (0 = hole, 1 = valid)")


def encode(model: Model, image_in: Tensor4, mask: Tensor4) -> EncoderState:
    """
    Run the mask-aware encoder.

    An all-hole mask silences the image branch at every level only while
    the mask-branch biases (enc.l.mask_b, enc.l.gen_b) are zero, as they
    are at initialization: relu(mask_b) > 0 makes m^l nonzero and gen_b
    alone makes theta nonzero, so kernels stop being zero once training
    moves those biases.

    Raises:
        ValidationError: mask is not binary
        ConfigurationError: channel counts or dims do not fit the model
    """
    cfg = model.config
    check_binary_mask(mask)
    if mask.c != 1 or image_in.c != cfg.in_channels:
        raise ConfigurationError(
            f"Expected {cfg.in_channels}-channel image and 1-channel mask, got {image_in.c} and {mask.c}"
        )
    if (image_in.n, image_in.h, image_in.w) != (mask.n, mask.h, mask.w):
        raise ConfigurationError(f"Image {image_in.shape} and mask {mask.shape} disagree")
    cfg.check_input(image_in.h, image_in.w)

    state = EncoderState(skip0=concat_channels(image_in, mask))
    m, e = mask, image_in
    for l in range(1, cfg.levels + 1):
        spec = cfg.encoder_spec(l)
        m, theta = mask_branch_step(m, model.madf_params(l), spec)
        e = relu(madf_conv(e, theta, spec))
        u = channel_lift(e, model.params[f"enc.{l}.lift_w"], model.params[f"enc.{l}.lift_b"])
        state.masks.append(m)
        state.images.append(e)
        state.lifted.append(u)
        state.kernels.append(theta)
    return state


def _check_doubled(low: Tensor4, high: Tensor4, what: str) -> None:
    if (high.n, high.h, high.w) != (low.n, 2 * low.h, 2 * low.w):
        raise ConfigurationError(f"{what} {high.shape} is not twice the resolution of {low.shape}")


def recovery_block(r_l: Tensor4, u_prev: Tensor4, params: RecoveryBlockParams) -> Tensor4:
    """r^{l-1} = lrelu(conv3x3(concat(dconv(r^l), u^{l-1})))."""
    _check_doubled(r_l, u_prev, "Skip")
    c_mid = params.up_w.shape[1]
    up_spec = ConvSpec(k=UP_KERNEL, s=UP_STRIDE, pad=UP_PAD, c_in=r_l.c, c_out=c_mid)
    x = concat_channels(conv2d_transpose(r_l, params.up_w, up_spec, bias=params.up_b), u_prev)
    spec = ConvSpec.same(3, x.c, params.conv_w.shape[0])
    return leaky_relu(conv2d(x, params.conv_w, spec, bias=params.conv_b))


def refine_block(f_lk: Tensor4, guide: Tensor4, params: RefineBlockParams, bn: BnState,
                 training: bool) -> Tensor4:
    """
    f^{l-1,k} = lrelu(norm(conv3x3(concat(up2(f^{l,k}), guide)))).

    norm is point_norm conditioned on guide, or BN with a learned affine
    when params carry no PnParams.
    """
    _check_doubled(f_lk, guide, "Guide")
    x = concat_channels(upsample_nearest2x(f_lk), guide)
    spec = ConvSpec.same(3, x.c, params.conv_w.shape[0])
    x = conv2d(x, params.conv_w, spec, bias=params.conv_b)
    if params.pn is not None:
        x = point_norm(x, guide, params.pn, bn, training)
    else:
        x = batch_norm_affine(x, bn, params.gamma, params.beta, training)
    return leaky_relu(x)


def forward_full(model: Model, image_in: Tensor4, mask: Tensor4) -> DecoderOutputs:
    """
    Encoder plus all K + 1 decoders; images are unclamped.

    Decoder d's features are keyed by level 0..L, with level L being u^L.
    """
    cfg = model.config
    enc = encode(model, image_in, mask)
    top = enc.u(cfg.levels)
    head_spec = cfg.output_head()

    feats = {cfg.levels: top}
    r = top
    for l in range(cfg.levels, 0, -1):
        r = recovery_block(r, enc.u(l - 1), model.recovery_params(l))
        feats[l - 1] = r
    head_w, head_b = model.head(0)
    images = [conv2d(feats[0], head_w, head_spec, bias=head_b)]
    features = [feats]

    for k in range(1, cfg.refinements + 1):
        prev = features[-1]
        feats = {cfg.levels: top}
        f = top
        for l in range(cfg.levels, 0, -1):
            f = refine_block(f, prev[l - 1], model.refine_params(k, l),
                             model.bn_states[f"ref{k}.{l}.bn"], model.training)
            feats[l - 1] = f
        head_w, head_b = model.head(k)
        images.append(conv2d(feats[0], head_w, head_spec, bias=head_b))
        features.append(feats)

    return DecoderOutputs(images=images, features=features)


# ============================================================
# KERNEL DUMP
# ============================================================

@dataclass
class KernelDump:
    """First-level kernels at selected windows, as a grayscale grid."""

    grid: np.ndarray              # uint8 (rows * cell, (channels + 1) * cell)
    windows: list                 # (i, j) window coordinates per row
    valid_fractions: np.ndarray   # fraction of valid mask pixels per selected window
    energies: np.ndarray          # L2 norm of each window's full kernel
    kernel_energies: np.ndarray   # (rows, channels) L2 norm per shown kernel


def dump_first_layer_kernels(model: Model, mask: np.ndarray, rows: int = 4, channels: int = 16,
                             scale: int = 10) -> KernelDump:
    """
    Render level-1 dynamic kernels for windows spanning all-valid to all-masked.

    Each row shows the window's mask patch followed by the first `channels`
    output kernels (averaged over input channels), each upscaled `scale`x.

    Args:
        mask: (H, W) or (1, 1, H, W) binary mask
    """
    cfg = model.config
    m = np.asarray(mask, dtype=model.dtype).reshape(1, 1, *np.asarray(mask).shape[-2:])
    m_t = Tensor4(m)
    check_binary_mask(m_t)

    spec = cfg.encoder_spec(1)
    params = model.madf_params(1)
    _, field_ = mask_branch_step(m_t, params, spec)
    kernels = field_.window_kernels(0)              # (NH, NW, c_out, c_in, k, k)
    nh, nw = kernels.shape[:2]

    mask_spec = params.mask_spec(spec)
    patches = im2col(pad_input(m, mask_spec.pad, "edge"), spec.k, spec.s, nh, nw)[0, 0]
    frac = patches.mean(axis=(0, 1)).reshape(-1)
    order = np.argsort(-frac, kind="stable")
    picks = order[np.linspace(0, order.size - 1, num=min(rows, order.size)).round().astype(int)]

    channels = min(channels, spec.c_out)
    flat = kernels.reshape(nh * nw, spec.c_out, spec.c_in, spec.k, spec.k)
    shown = flat[picks, :channels].mean(axis=2)     # (rows, channels, k, k)
    energies = np.sqrt((flat[picks] ** 2).sum(axis=(1, 2, 3, 4)))
    kernel_energies = np.sqrt((flat[picks, :channels] ** 2).sum(axis=(2, 3, 4)))

    peak = float(np.abs(shown).max()) or 1.0
    cell = spec.k * scale
    grid = np.zeros((len(picks) * cell, (channels + 1) * cell), dtype=np.uint8)
    for row, idx in enumerate(picks):
        i, j = divmod(int(idx), nw)
        tiles = [patches[:, :, i, j] * 255.0]
        tiles += [127.5 + 127.5 * shown[row, c] / peak for c in range(channels)]
        for col, tile in enumerate(tiles):
            up = cv2.resize(np.clip(tile, 0, 255).astype(np.uint8), (cell, cell),
                            interpolation=cv2.INTER_NEAREST)
            grid[row * cell:(row + 1) * cell, col * cell:(col + 1) * cell] = up

    windows = [divmod(int(idx), nw) for idx in picks]
    return KernelDump(grid=grid, windows=windows, valid_fractions=frac[picks],
                      energies=energies, kernel_energies=kernel_energies)
