"""
Learnable and running state of a normalization layer.

A NormState with K contexts holds gamma/beta per channel, per-context running
means and variances, the dataset-level proportions lambda, eps and the
momentum (retention) factor alpha. K = 1 with lambda = {1} is plain batch
normalization state.
"""

import json
import logging
from dataclasses import dataclass
from typing import Any, Dict

import numpy as np

from errors import ErrorCode, NormError, require

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.9
LAMBDA_TOLERANCE = 1e-9


@dataclass
class NormState:
    """Per-layer parameters and running statistics."""
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    lam: np.ndarray
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM
    batches_seen: int = 0

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        self.running_mean = np.atleast_2d(np.asarray(self.running_mean, dtype=np.float64))
        self.running_var = np.atleast_2d(np.asarray(self.running_var, dtype=np.float64))
        self.validate()

    @classmethod
    def create(cls, channels: int, k: int = 1, lam=None, eps: float = DEFAULT_EPS,
               momentum: float = DEFAULT_MOMENTUM) -> "NormState":
        """
        Fresh state: gamma = 1, beta = 0, running mean 0 and variance 1 per context.

        Args:
            channels: number of channels C
            k: number of contexts
            lam: dataset-level context proportions (uniform when omitted)
            eps: variance offset
            momentum: retention factor alpha of the running averages
        """
        require(channels >= 1, ErrorCode.INVALID_ARGUMENT, f"channels must be >= 1, got {channels}")
        require(k >= 1, ErrorCode.INVALID_ARGUMENT, f"K must be >= 1, got {k}")
        if lam is None:
            lam = np.full(k, 1.0 / k)
        return cls(gamma=np.ones(channels), beta=np.zeros(channels),
                   running_mean=np.zeros((k, channels)), running_var=np.ones((k, channels)),
                   lam=lam, eps=eps, momentum=momentum)

    @property
    def k(self) -> int:
        return int(self.lam.shape[0])

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])

    def validate(self):
        """Check shapes and hyperparameter ranges."""
        channels, k = self.gamma.shape[0], self.lam.shape[0]
        require(self.beta.shape == (channels,), ErrorCode.SHAPE_MISMATCH,
                f"beta has shape {self.beta.shape}, expected ({channels},)")
        require(self.running_mean.shape == (k, channels) and self.running_var.shape == (k, channels),
                ErrorCode.SHAPE_MISMATCH,
                f"running statistics must have shape ({k}, {channels})")
        require(self.eps > 0, ErrorCode.BAD_EPSILON, f"eps must be > 0, got {self.eps}")
        require(0.0 <= self.momentum < 1.0, ErrorCode.INVALID_ARGUMENT,
                f"momentum must lie in [0, 1), got {self.momentum}")
        require(bool(np.all(self.running_var >= 0)), ErrorCode.INVALID_ARGUMENT,
                "running variances must be >= 0")
        require(bool(np.all(self.lam > 0)), ErrorCode.EMPTY_CONTEXT,
                "every context needs a positive proportion")
        require(abs(float(self.lam.sum()) - 1.0) <= LAMBDA_TOLERANCE, ErrorCode.INVALID_ARGUMENT,
                f"lambda must sum to 1, got {self.lam.sum()!r}")

    def copy(self) -> "NormState":
        return NormState(gamma=self.gamma.copy(), beta=self.beta.copy(),
                         running_mean=self.running_mean.copy(),
                         running_var=self.running_var.copy(), lam=self.lam.copy(),
                         eps=self.eps, momentum=self.momentum, batches_seen=self.batches_seen)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "eps": self.eps,
            "alpha": self.momentum,
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "lambda": self.lam.tolist(),
            "running_mean": self.running_mean.tolist(),
            "running_var": self.running_var.tolist(),
            "batches_seen": self.batches_seen,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "NormState":
        state = cls(gamma=payload["gamma"], beta=payload["beta"],
                    running_mean=payload["running_mean"], running_var=payload["running_var"],
                    lam=payload["lambda"], eps=float(payload["eps"]),
                    momentum=float(payload["alpha"]),
                    batches_seen=int(payload.get("batches_seen", 0)))
        require(state.k == int(payload["k"]), ErrorCode.SHAPE_MISMATCH,
                f"k={payload['k']} does not match {state.k} contexts")
        return state

    def to_json(self) -> str:
        # json writes floats with repr(): 17 significant digits round-trip exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "NormState":
        return cls.from_dict(json.loads(text))


def update_running(state: NormState, k: int, mean, var) -> NormState:
    """
    Exponential update of context k's running statistics, in place.

    mu_bar_k <- alpha * mu_bar_k + (1 - alpha) * mean
    var_bar_k <- alpha * var_bar_k + (1 - alpha) * var
    """
    if not 0 <= k < state.k:
        raise NormError(ErrorCode.BAD_CONTEXT, f"context {k} outside [0, {state.k})")
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    var = np.asarray(var, dtype=np.float64).reshape(-1)
    require(mean.shape == (state.channels,) and var.shape == (state.channels,),
            ErrorCode.SHAPE_MISMATCH, f"statistics must have length {state.channels}")
    alpha = state.momentum
    state.running_mean[k] = alpha * state.running_mean[k] + (1.0 - alpha) * mean
    state.running_var[k] = alpha * state.running_var[k] + (1.0 - alpha) * var
    return state

