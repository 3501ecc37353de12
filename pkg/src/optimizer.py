"""
Optimizer - Adam with bias correction, fixed learning rate, no weight decay
"""

import logging
from dataclasses import dataclass, field

import numpy as np

import config
from errors import ConfigurationError, NumericError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moments per parameter name and the step counter t."""

    lr: float = config.ADAM_LR
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    eps: float = config.ADAM_EPS
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState) -> None:
    """
    Apply one Adam update in place from each parameter's .grad.

    Every gradient is checked before any parameter moves, so a failed step
    leaves parameters and moments untouched.

    Args:
        params: name -> Tensor4 with .grad populated

    Raises:
        ConfigurationError: a parameter has no gradient
        NumericError: a gradient holds NaN or Inf
    """
    for name, p in params.items():
        if p.grad is None:
            raise ConfigurationError(f"Parameter {name} has no gradient")
        if not np.isfinite(p.grad).all():
            raise NumericError(f"Non-finite gradient for {name} at step {state.t + 1}")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t

    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]

        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)

        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
