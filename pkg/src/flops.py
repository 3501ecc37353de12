"""
FLOPs Accounting - analytic multiply counts per network component

Counts floating point multiplications for one sample:
  conv          N_H * N_W * c_out * c_in * k^2
  transposed    H_in * W_in * c_in * c_out * k^2
  dynamic conv  window math + kernel generation N_H * N_W * C_m * D
  point norm    three 3x3 convs + 2 multiplies per output element
  BN affine     2 multiplies per output element
Additions, activations and pooling are not counted.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

from madf_layers import kernel_dim
from model import UP_KERNEL, ModelConfig

logger = logging.getLogger(__name__)


def conv_mults(nh: int, nw: int, c_in: int, c_out: int, k: int) -> int:
    return nh * nw * c_out * c_in * k * k


@dataclass
class FlopsReport:
    hw: tuple
    components: "OrderedDict[str, int]" = field(default_factory=OrderedDict)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def refinement(self, k: int) -> int:
        return self.components[f"refine_{k}"]

    def render_table(self) -> str:
        lines = [f"{'component':<14}{'multiplies':>18}{'G':>10}", "-" * 42]
        for name, count in list(self.components.items()) + [("total", self.total)]:
            lines.append(f"{name:<14}{count:>18,}{count / 1e9:>10.2f}")
        return "\n".join(lines)

    def render_kv(self) -> str:
        lines = [f"flops.hw={self.hw[0]}x{self.hw[1]}"]
        for name, count in self.components.items():
            lines.append(f"flops.{name}={count}")
        lines.append(f"flops.total={self.total}")
        return "\n".join(lines)


def encoder_flops(cfg: ModelConfig, h: int, w: int) -> int:
    total = 0
    for l in range(1, cfg.levels + 1):
        spec = cfg.encoder_spec(l)
        nh, nw = h >> l, w >> l
        c_m = cfg.mask_channels[l - 1]
        total += conv_mults(nh, nw, cfg.mask_in_channels(l), c_m, spec.k)   # mask conv
        total += nh * nw * c_m * kernel_dim(spec)                           # kernel generation
        total += conv_mults(nh, nw, spec.c_in, spec.c_out, spec.k)          # per-window filtering
        total += conv_mults(nh, nw, spec.c_out, cfg.skip_channels(l), 1)    # channel lift
    return total


def recovery_flops(cfg: ModelConfig, h: int, w: int) -> int:
    widths = cfg.decoder_widths
    total = 0
    for l in range(cfg.levels, 0, -1):
        hi_h, hi_w = h >> l, w >> l
        lo_h, lo_w = h >> (l - 1), w >> (l - 1)
        total += hi_h * hi_w * widths[l] * widths[l - 1] * UP_KERNEL * UP_KERNEL
        total += conv_mults(lo_h, lo_w, widths[l - 1] + cfg.skip_channels(l - 1), widths[l - 1], 3)
    return total + conv_mults(h, w, widths[0], cfg.out_channels, 3)


def refinement_flops(cfg: ModelConfig, h: int, w: int) -> int:
    """Cost of one refinement decoder, head included."""
    widths = cfg.decoder_widths
    total = 0
    for l in range(cfg.levels, 0, -1):
        lo_h, lo_w = h >> (l - 1), w >> (l - 1)
        c_lo = widths[l - 1]
        total += conv_mults(lo_h, lo_w, widths[l] + c_lo, c_lo, 3)
        if cfg.pn_enabled:
            total += conv_mults(lo_h, lo_w, c_lo, cfg.pn_latent, 3)
            total += 2 * conv_mults(lo_h, lo_w, cfg.pn_latent, c_lo, 3)
        total += 2 * lo_h * lo_w * c_lo
    return total + conv_mults(h, w, widths[0], cfg.out_channels, 3)


def count_flops(cfg: ModelConfig, hw: Optional[tuple] = None) -> FlopsReport:
    """
    Per-component multiply counts for one sample of size hw (default cfg.image_size).

    Raises:
        ConfigurationError: hw not divisible by 2^L
    """
    h, w = hw if hw is not None else cfg.image_size
    cfg.check_input(h, w)
    report = FlopsReport(hw=(h, w))
    report.components["encoder"] = encoder_flops(cfg, h, w)
    report.components["recovery"] = recovery_flops(cfg, h, w)
    per_refinement = refinement_flops(cfg, h, w)
    for k in range(1, cfg.refinements + 1):
        report.components[f"refine_{k}"] = per_refinement
    logger.debug(f"FLOPs at {h}x{w}: {report.total:,}")
    return report
