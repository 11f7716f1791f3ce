"""
AdamW: Adam with bias correction and decoupled weight decay.

Parameters are updated in place. gamma and beta of normalization layers are
excluded from weight decay.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from errors import ErrorCode, NormError

logger = logging.getLogger(__name__)

NO_DECAY_SUFFIXES = (".gamma", ".beta")


@dataclass
class OptState:
    """Moment accumulators per parameter plus hyperparameters."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray], **hyperparameters) -> "OptState":
        """Zeroed accumulators mirroring the parameter shapes."""
        opt = cls(**hyperparameters)
        for name, value in params.items():
            opt.first_moment[name] = np.zeros_like(value, dtype=np.float64)
            opt.second_moment[name] = np.zeros_like(value, dtype=np.float64)
        return opt


def decays(name: str) -> bool:
    """Whether weight decay applies to the named parameter."""
    return not name.endswith(NO_DECAY_SUFFIXES)


def adamw_step(opt: OptState, params: Dict[str, np.ndarray],
               grads: Dict[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], OptState]:
    """
    One AdamW update.

    theta <- theta - lr * wd * theta - lr * m_hat / (sqrt(v_hat) + eps)

    Args:
        opt: optimizer state (mutated)
        params: parameter arrays, updated in place
        grads: gradients keyed like `params`

    Returns:
        (params, opt)
    """
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise NormError(ErrorCode.SHAPE_MISMATCH, f"parameters and gradients differ on {missing}")

    for name, value in params.items():
        if np.shape(grads[name]) != value.shape:
            raise NormError(ErrorCode.SHAPE_MISMATCH,
                            f"{name}: gradient shape {np.shape(grads[name])} != {value.shape}")
        for accumulator in (opt.first_moment, opt.second_moment):
            if name not in accumulator:
                accumulator[name] = np.zeros_like(value, dtype=np.float64)
            elif accumulator[name].shape != value.shape:
                raise NormError(ErrorCode.SHAPE_MISMATCH,
                                f"{name}: accumulator shape {accumulator[name].shape} != {value.shape}")

    opt.step += 1
    correction1 = 1.0 - opt.beta1 ** opt.step
    correction2 = 1.0 - opt.beta2 ** opt.step

    for name, value in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        m = opt.first_moment[name]
        v = opt.second_moment[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * grad
        v *= opt.beta2
        v += (1.0 - opt.beta2) * np.square(grad)

        if opt.weight_decay and decays(name):
            value -= opt.lr * opt.weight_decay * value
        value -= opt.lr * (m / correction1) / (np.sqrt(v / correction2) + opt.eps)

    return params, opt
