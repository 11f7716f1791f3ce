"""
Finite-difference gradient auditing.

Analytic gradients are compared with central differences
(f(theta + h) - f(theta - h)) / 2h, one scalar entry at a time, and the worst
relative error is reported per parameter block.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from errors import ErrorCode, NormError, require

logger = logging.getLogger(__name__)

LossFn = Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]]


@dataclass
class BlockReport:
    name: str
    max_abs_error: float
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    step: float
    tol: float
    blocks: List[BlockReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(block.passed for block in self.blocks)

    @property
    def max_rel_error(self) -> float:
        return max((block.max_rel_error for block in self.blocks), default=0.0)

    def failed_blocks(self) -> List[str]:
        return [block.name for block in self.blocks if not block.passed]

    def block(self, name: str) -> BlockReport:
        for block in self.blocks:
            if block.name == name:
                return block
        raise KeyError(name)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> Tuple[float, float]:
    """Absolute and block-relative error: max|a - n| / max(max|a|, max|n|)."""
    abs_error = float(np.max(np.abs(analytic - numeric), initial=0.0))
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        return abs_error, 0.0
    return abs_error, abs_error / scale


def numeric_gradient(loss_fn: LossFn, params: Dict[str, np.ndarray], name: str,
                     step: float) -> np.ndarray:
    """Central differences for one block; entries are perturbed in place and restored."""
    values = params[name]
    flat = values.reshape(-1)
    result = np.zeros(flat.shape[0])
    for i in range(flat.shape[0]):
        original = flat[i]
        flat[i] = original + step
        plus, _ = loss_fn(params)
        flat[i] = original - step
        minus, _ = loss_fn(params)
        flat[i] = original
        result[i] = (plus - minus) / (2.0 * step)
    return result.reshape(values.shape)


def finite_diff_check(loss_fn: LossFn, params: Dict[str, np.ndarray], step: float = 1e-3,
                      tol: float = 1e-4) -> GradCheckReport:
    """
    Audit analytic gradients against central finite differences.

    Args:
        loss_fn: params -> (loss, grads); must be deterministic
        params: parameter blocks by name; perturbed in place, restored on return
        step: difference step h
        tol: pass threshold on each block's relative error

    Returns:
        GradCheckReport with one BlockReport per parameter block
    """
    require(step > 0, ErrorCode.INVALID_ARGUMENT, f"step must be > 0, got {step}")
    first_loss, analytic = loss_fn(params)
    second_loss, _ = loss_fn(params)
    if first_loss != second_loss:
        raise NormError(ErrorCode.NONDETERMINISTIC_LOSS,
                        f"loss changed between identical evaluations: {first_loss!r} vs {second_loss!r}")
    analytic = {name: np.array(grad, dtype=np.float64, copy=True) for name, grad in analytic.items()}

    report = GradCheckReport(step=step, tol=tol)
    for name in params:
        require(name in analytic, ErrorCode.SHAPE_MISMATCH, f"no analytic gradient for {name}")
        require(analytic[name].shape == params[name].shape, ErrorCode.SHAPE_MISMATCH,
                f"{name}: gradient shape {analytic[name].shape} != {params[name].shape}")
        numeric = numeric_gradient(loss_fn, params, name, step)
        abs_error, rel_error = relative_error(analytic[name], numeric)
        report.blocks.append(BlockReport(name=name, max_abs_error=abs_error,
                                         max_rel_error=rel_error, passed=rel_error <= tol))
        logger.debug(f"grad check {name}: abs {abs_error:.3e}, rel {rel_error:.3e}")

    if report.passed:
        logger.info(f"Gradient check passed on {len(report.blocks)} blocks "
                    f"(max rel error {report.max_rel_error:.3e})")
    else:
        logger.warning(f"Gradient check failed for {report.failed_blocks()}")
    return report
