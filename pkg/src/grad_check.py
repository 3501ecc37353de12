"""
Gradient Checks - central finite differences against the tape

grad_check() compares analytic gradients with (f(x + h) - f(x - h)) / 2h
at float64. Error per element is |a - n| / max(1, |a|, |n|); the report
keeps the worst element per input.

Named suites (run_suite) cover the tensor ops, the mask-aware layers, the
losses through FeatureNet and a micro model end to end. They back the
`gradcheck` CLI command and the test suite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from autodiff import Tape, Tensor4, activation, backward, concat_channels, gram, slice_spatial
from conv_ops import ConvSpec, avg_pool2x2, conv2d, conv2d_transpose, upsample_nearest2x
from errors import ConfigurationError
from losses import (
    FeatureNet,
    compose,
    loss_hole,
    loss_perceptual,
    loss_style,
    loss_tv,
    loss_valid,
    supervision_losses,
)
from madf_layers import (
    BnState,
    KernelField,
    MadfLayerParams,
    PnParams,
    batch_norm,
    kernel_dim,
    madf_conv,
    mask_branch_step,
    point_norm,
)
from model import ModelConfig, build_model, forward_full

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-4
PLAIN_OP_TOLERANCE = 1e-5
COMPOSITE_TOLERANCE = 1e-4
SUITES = ("tensor", "madf", "losses", "model")


@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    per_input: list = field(default_factory=list)   # (label, max error, elements checked)

    @property
    def max_rel_error(self) -> float:
        return max((err for _, err, _ in self.per_input), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        mark = "✓" if self.passed else "❌"
        return f"{mark} {self.name}: max rel err {self.max_rel_error:.2e} (tol {self.tolerance:.0e})"


def _rel_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def grad_check(fn: Callable, inputs: Sequence[Tensor4], h: float = DEFAULT_STEP,
               tolerance: float = COMPOSITE_TOLERANCE, max_elements: Optional[int] = None,
               seed: int = 0, name: str = "op", labels: Optional[Sequence[str]] = None) -> GradCheckReport:
    """
    Check d fn(*inputs) / d input for every input.

    Args:
        fn: callable returning a 1x1x1x1 Tensor4; it may read inputs through
            a closure, since perturbations are applied in place
        inputs: float64 Tensor4s with requires_grad=True
        max_elements: check a seeded random subset of this many elements per input

    Raises:
        ConfigurationError: an input is not float64
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ConfigurationError(f"grad_check runs at float64, got {t.dtype} input")
        t.requires_grad = True
    labels = list(labels) if labels is not None else [f"input{i}" for i in range(len(inputs))]

    with Tape() as tape:
        loss = fn(*inputs)
    backward(tape, loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = np.random.default_rng(seed)
    report = GradCheckReport(name=name, tolerance=tolerance)
    for label, t, grad in zip(labels, inputs, analytic):
        count = t.size
        picks = np.arange(count)
        if max_elements is not None and count > max_elements:
            picks = np.sort(rng.choice(count, size=max_elements, replace=False))

        numeric = np.empty(picks.size)
        for j, flat in enumerate(picks):
            idx = np.unravel_index(flat, t.shape)
            original = t.data[idx]
            t.data[idx] = original + h
            plus = fn(*inputs).item()
            t.data[idx] = original - h
            minus = fn(*inputs).item()
            t.data[idx] = original
            numeric[j] = (plus - minus) / (2 * h)

        err = _rel_error(grad.reshape(-1)[picks], numeric)
        report.per_input.append((label, float(err.max()) if err.size else 0.0, int(picks.size)))

    level = logging.DEBUG if report.passed else logging.WARNING
    logger.log(level, report.summary())
    return report


# ============================================================
# SUITES
# ============================================================

def _rand(rng, *shape, scale=1.0) -> Tensor4:
    return Tensor4(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _projector(rng, shape) -> Tensor4:
    """Fixed random weights that reduce an op's output to a scalar."""
    return Tensor4(rng.normal(size=shape))


def _check_op(name, op, inputs, rng, tolerance, labels=None) -> GradCheckReport:
    sample = op(*inputs)
    weights = _projector(rng, sample.shape)
    return grad_check(lambda *xs: (op(*xs) * weights).sum(), inputs,
                      tolerance=tolerance, name=name, labels=labels)


def tensor_suite(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    reports = []
    tol = PLAIN_OP_TOLERANCE

    spec = ConvSpec.same(3, 2, 3, s=2)
    reports.append(_check_op(
        "conv2d k3 s2", lambda x, w, b: conv2d(x, w, spec, bias=b),
        [_rand(rng, 2, 2, 6, 6), _rand(rng, 3, 2, 3, 3), _rand(rng, 1, 3, 1, 1)], rng, tol,
        labels=["x", "w", "b"]))

    edge = ConvSpec.same(3, 2, 2, pad_mode="edge")
    reports.append(_check_op(
        "conv2d edge pad", lambda x, w: conv2d(x, w, edge),
        [_rand(rng, 1, 2, 5, 4), _rand(rng, 2, 2, 3, 3)], rng, tol, labels=["x", "w"]))

    up = ConvSpec(k=4, s=2, pad=1, c_in=3, c_out=2)
    reports.append(_check_op(
        "conv2d_transpose", lambda x, w, b: conv2d_transpose(x, w, up, bias=b),
        [_rand(rng, 2, 3, 3, 3), _rand(rng, 3, 2, 4, 4), _rand(rng, 1, 2, 1, 1)], rng, tol,
        labels=["x", "w", "b"]))

    for kind in ("relu", "leaky_relu", "sigmoid"):
        reports.append(_check_op(
            kind, lambda x, kind=kind: activation(x, kind), [_rand(rng, 2, 3, 4, 4)], rng, tol))

    reports.append(_check_op(
        "concat_channels", concat_channels,
        [_rand(rng, 1, 2, 3, 3), _rand(rng, 1, 3, 3, 3)], rng, tol))
    reports.append(_check_op("upsample_nearest2x", upsample_nearest2x, [_rand(rng, 1, 2, 3, 4)], rng, tol))
    reports.append(_check_op("avg_pool2x2", avg_pool2x2, [_rand(rng, 1, 2, 4, 6)], rng, tol))
    reports.append(_check_op(
        "slice_spatial", lambda x: slice_spatial(x, (1, 4), (0, 2)), [_rand(rng, 1, 2, 5, 3)], rng, tol))
    reports.append(_check_op("gram", lambda x: gram(x, 0.1), [_rand(rng, 2, 3, 3, 4)], rng, tol))
    reports.append(_check_op(
        "mul broadcast", lambda a, b: a * b,
        [_rand(rng, 2, 3, 4, 4), _rand(rng, 1, 3, 1, 1)], rng, tol))
    reports.append(_check_op("abs", lambda x: x.abs(), [_rand(rng, 1, 2, 3, 3)], rng, tol))

    for training in (True, False):
        state = BnState.create(3, dtype=np.float64)
        state.running_mean[:] = rng.normal(size=3)
        state.running_var[:] = rng.uniform(0.5, 2.0, size=3)
        reports.append(_check_op(
            f"batch_norm training={training}",
            lambda x, state=state, training=training: batch_norm(x, state, training),
            [_rand(rng, 3, 3, 4, 4, scale=2.0)], rng, tol))
    return reports


def madf_suite(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    reports = []

    spec = ConvSpec.same(3, 2, 3, s=2)
    d = kernel_dim(spec)
    theta = _rand(rng, 1, d, 3, 3)
    reports.append(_check_op(
        "madf_conv",
        lambda e, t: madf_conv(e, KernelField(t, spec), spec),
        [_rand(rng, 1, 2, 6, 6), theta], rng, PLAIN_OP_TOLERANCE, labels=["e", "theta"]))

    mask = Tensor4((rng.uniform(size=(1, 1, 6, 6)) > 0.4).astype(np.float64))
    params = MadfLayerParams(
        mask_w=_rand(rng, 4, 1, 3, 3, scale=0.5), mask_b=_rand(rng, 1, 4, 1, 1, scale=0.2),
        gen_w=_rand(rng, d, 4, 1, 1, scale=0.5), gen_b=_rand(rng, 1, d, 1, 1, scale=0.2),
    )
    e = _rand(rng, 1, 2, 6, 6)

    def madf_level(mask_w, mask_b, gen_w, gen_b, e_in):
        p = MadfLayerParams(mask_w, mask_b, gen_w, gen_b)
        _, field_ = mask_branch_step(mask, p, spec)
        return madf_conv(e_in, field_, spec)

    reports.append(_check_op(
        "mask_branch_step + madf_conv", madf_level,
        [params.mask_w, params.mask_b, params.gen_w, params.gen_b, e], rng, COMPOSITE_TOLERANCE,
        labels=["mask_w", "mask_b", "gen_w", "gen_b", "e"]))

    bn = BnState.create(3, dtype=np.float64)
    pn_inputs = [
        _rand(rng, 2, 3, 4, 4, scale=2.0),      # x
        _rand(rng, 2, 2, 4, 4),                 # guide
        _rand(rng, 4, 2, 3, 3, scale=0.3), _rand(rng, 1, 4, 1, 1, scale=0.1),
        _rand(rng, 3, 4, 3, 3, scale=0.3), _rand(rng, 1, 3, 1, 1, scale=0.1),
        _rand(rng, 3, 4, 3, 3, scale=0.3), _rand(rng, 1, 3, 1, 1, scale=0.1),
    ]

    def pn(x, guide, *weights):
        return point_norm(x, guide, PnParams(*weights), bn, training=True)

    reports.append(_check_op(
        "point_norm", pn, pn_inputs, rng, PLAIN_OP_TOLERANCE,
        labels=["x", "guide", "proj_w", "proj_b", "scale_w", "scale_b", "bias_w", "bias_b"]))
    return reports


def losses_suite(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    net = FeatureNet()
    gt = Tensor4(rng.uniform(size=(2, 3, 8, 8)))
    mask_data = np.ones((2, 1, 8, 8))
    mask_data[0, 0, 2:5, 3:7] = 0
    mask_data[1, 0, 5:8, 0:3] = 0
    mask = Tensor4(mask_data)
    out = Tensor4(rng.uniform(size=(2, 3, 8, 8)), requires_grad=True)
    tol = COMPOSITE_TOLERANCE

    checks = [
        ("loss_hole", lambda o: loss_hole(o, gt, mask)),
        ("loss_valid", lambda o: loss_valid(o, gt, mask)),
        ("loss_perceptual", lambda o: loss_perceptual(o, compose(o, gt, mask), gt, net)),
        ("loss_style", lambda o: loss_style(o, compose(o, gt, mask), gt, net)),
        ("loss_tv", lambda o: loss_tv(compose(o, gt, mask), mask)),
    ]
    return [grad_check(fn, [out], tolerance=tol, name=name, labels=["i_out"]) for name, fn in checks]


def randomize_parameters(model, rng: np.random.Generator) -> None:
    """Replace every parameter with well-scaled random values (fan-in scaled weights)."""
    for name, t in model.params.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("pn_scale_b", "bn_gamma"):
            t.data[...] = 1.0 + rng.normal(0.0, 0.1, size=t.shape)
        elif leaf.endswith("_b") or leaf == "bn_beta":
            t.data[...] = rng.normal(0.0, 0.1, size=t.shape)
        else:
            fan_in = t.shape[1] * t.shape[2] * t.shape[3]
            t.data[...] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=t.shape)


def model_suite(seed: int = 0, max_elements: int = 6) -> list:
    """Full micro-model loss gradients, with point-wise normalization and with plain BN."""
    reports = []
    for pn_enabled in (True, False):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig.preset("micro", pn_enabled=pn_enabled)
        model = build_model(cfg, seed=seed, dtype=np.float64)
        randomize_parameters(model, rng)
        net = FeatureNet()

        h, w = cfg.image_size
        gt = Tensor4(rng.uniform(size=(2, 3, h, w)))
        mask_data = np.ones((2, 1, h, w))
        mask_data[0, 0, 2:6, 3:7] = 0
        mask_data[1, 0, 0:3, 4:8] = 0
        mask = Tensor4(mask_data)
        image_in = Tensor4(gt.data * mask_data)

        def total_loss(*_):
            outputs = forward_full(model, image_in, mask)
            _, total = supervision_losses(outputs, gt, mask, net, refinements=cfg.refinements)
            return total

        names = list(model.params)
        name = "micro model (PN)" if pn_enabled else "micro model (BN)"
        reports.append(grad_check(total_loss, [model.params[n] for n in names],
                                  tolerance=COMPOSITE_TOLERANCE, max_elements=max_elements,
                                  seed=seed, name=name, labels=names))
    return reports


def run_suite(name: str, seed: int = 0) -> list:
    """Run one named suite and return its reports."""
    suites = {
        "tensor": tensor_suite,
        "madf": madf_suite,
        "losses": losses_suite,
        "model": model_suite,
    }
    if name not in suites:
        raise ConfigurationError(f"Unknown gradient suite '{name}', expected one of {SUITES}")
    return suites[name](seed=seed)
