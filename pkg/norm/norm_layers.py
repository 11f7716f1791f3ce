"""
Normalization layers: batch, layer, instance, mixture and supervised batch
normalization, with train/eval modes and analytic backward passes.

Supervised batch normalization (SBN) normalizes each sample with the
statistics of its context k and scales by 1/sqrt(lambda_k), where lambda_k is
the dataset-level proportion of context k:

    x_hat_n = gamma * (1/sqrt(lambda_k)) * (x_n - mu_k) / sqrt(var_k + eps) + beta

With K = 1 and lambda = {1} it is batch normalization. Mixture normalization
(MN) replaces the hard context by posteriors p(k|x_n) and sums the K
standardizations; SBN inference with unknown contexts uses the same sum over
running statistics.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from context_builder.context_builder import ContextAssignment
from errors import ErrorCode, NormError, require
from gmm.mixture_model import VARIANCE_FLOOR, GmmModel, gmm_posterior
from norm.norm_state import NormState, update_running
from numeric_core.arrays import (CHANNEL_AXES, affine, as_batch, channel_moments,
                                 check_same_shape, per_channel, sample_features,
                                 standardize)

logger = logging.getLogger(__name__)

POSTERIOR_TOLERANCE = 1e-6
# components whose soft count in a batch falls below this are treated as absent
MIN_SOFT_COUNT = 1e-8


class Mode(Enum):
    """Layer mode. EVAL means running statistics (known contexts for SBN)."""
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class ForwardCache:
    """Everything a backward pass needs from the forward pass."""
    kind: str
    mode: Mode
    x_hat: np.ndarray
    unit: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    counts: np.ndarray
    eps: float
    lam: np.ndarray
    indices: Optional[np.ndarray] = None
    posteriors: Optional[np.ndarray] = None
    present: Optional[np.ndarray] = None
    inv_std: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.x_hat.shape


# --------------------------------------------------------------------------
# shared kernels


def _unit_backward(d_unit: np.ndarray, unit: np.ndarray, inv_std: np.ndarray,
                   axes: Tuple[int, ...]) -> np.ndarray:
    """Gradient through u = (x - mean(x)) / sqrt(var(x) + eps) pooled over `axes`."""
    mean_d = d_unit.mean(axis=axes, keepdims=True)
    mean_du = (d_unit * unit).mean(axis=axes, keepdims=True)
    return inv_std * (d_unit - mean_d - unit * mean_du)


def _check_channels(state: NormState, batch: np.ndarray):
    require(state.channels == batch.shape[1], ErrorCode.SHAPE_MISMATCH,
            f"layer has {state.channels} channels, batch has {batch.shape[1]}")


def _check_posteriors(posteriors, n_samples: int, k: int) -> np.ndarray:
    posteriors = np.asarray(posteriors, dtype=np.float64)
    require(posteriors.shape == (n_samples, k), ErrorCode.SHAPE_MISMATCH,
            f"posteriors have shape {posteriors.shape}, expected ({n_samples}, {k})")
    require(bool(np.all(np.isfinite(posteriors))), ErrorCode.BAD_POSTERIOR,
            "posteriors contain NaN or Inf")
    row_error = float(np.abs(posteriors.sum(axis=1) - 1.0).max())
    if row_error > POSTERIOR_TOLERANCE:
        raise NormError(ErrorCode.BAD_POSTERIOR,
                        f"posterior rows must sum to 1 (max deviation {row_error:.3g})")
    if posteriors.min() < -POSTERIOR_TOLERANCE or posteriors.max() > 1 + POSTERIOR_TOLERANCE:
        raise NormError(ErrorCode.BAD_POSTERIOR, "posterior entries must lie in [0, 1]")
    return posteriors


def _grouped_forward(batch: np.ndarray, indices: np.ndarray, state: NormState, mode: Mode,
                     kind: str) -> Tuple[np.ndarray, ForwardCache]:
    """Normalize each context group with its own statistics (hard assignment)."""
    k_total, channels = state.k, batch.shape[1]
    means = np.zeros((k_total, channels))
    variances = np.zeros((k_total, channels))
    counts = np.bincount(indices, minlength=k_total)
    unit = np.zeros_like(batch)

    for k in range(k_total):
        rows = indices == k
        if counts[k] == 0:
            logger.debug(f"{kind}: context {k} absent from batch")
            continue
        group = batch[rows]
        if mode is Mode.TRAIN:
            mean, var = channel_moments(group)
        else:
            mean, var = state.running_mean[k].copy(), state.running_var[k].copy()
        means[k], variances[k] = mean, var
        unit[rows] = standardize(group, mean, var, state.eps)

    scale = 1.0 / np.sqrt(state.lam)
    x_hat = unit * scale[indices][:, None, None, None]
    out = affine(x_hat, state.gamma, state.beta)

    if mode is Mode.TRAIN:
        for k in np.flatnonzero(counts):
            update_running(state, int(k), means[k], variances[k])
        state.batches_seen += 1

    cache = ForwardCache(kind=kind, mode=mode, x_hat=x_hat, unit=unit, means=means,
                         variances=variances, counts=counts, eps=state.eps,
                         lam=state.lam.copy(), indices=indices.copy())
    return out, cache


def _grouped_backward(cache: ForwardCache, grad_out: np.ndarray,
                      state: NormState) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_out = np.asarray(grad_out, dtype=np.float64)
    check_same_shape(grad_out, cache.x_hat, "grad_out vs forward output")
    require(cache.indices is not None, ErrorCode.INVALID_ARGUMENT,
            f"cache of kind {cache.kind} carries no context indices")

    grad_beta = grad_out.sum(axis=CHANNEL_AXES)
    grad_gamma = (grad_out * cache.x_hat).sum(axis=CHANNEL_AXES)
    scale = 1.0 / np.sqrt(cache.lam)
    d_unit = grad_out * per_channel(state.gamma) * scale[cache.indices][:, None, None, None]

    grad_in = np.zeros_like(grad_out)
    for k in np.flatnonzero(cache.counts):
        rows = cache.indices == k
        inv_std = per_channel(1.0 / np.sqrt(cache.variances[k] + cache.eps))
        if cache.mode is Mode.TRAIN:
            grad_in[rows] = _unit_backward(d_unit[rows], cache.unit[rows], inv_std, CHANNEL_AXES)
        else:
            grad_in[rows] = d_unit[rows] * inv_std
    return grad_in, grad_gamma, grad_beta


def _mixture_forward(batch: np.ndarray, posteriors: np.ndarray, state: NormState, mode: Mode,
                     kind: str) -> Tuple[np.ndarray, ForwardCache]:
    """Posterior-weighted sum of per-component standardizations."""
    n_samples, channels, height, width = batch.shape
    k_total = state.k
    means = state.running_mean.copy()
    variances = state.running_var.copy()
    units = np.zeros((k_total,) + batch.shape)
    soft_counts = posteriors.sum(axis=0)
    present = np.zeros(k_total, dtype=bool)
    scale = 1.0 / np.sqrt(state.lam)
    x_hat = np.zeros_like(batch)

    for k in range(k_total):
        weights = posteriors[:, k]
        if mode is Mode.TRAIN and soft_counts[k] >= MIN_SOFT_COUNT:
            present[k] = True
            total = soft_counts[k] * height * width
            means[k] = weights @ batch.sum(axis=(2, 3)) / total
            deviation = np.square(batch - per_channel(means[k])).sum(axis=(2, 3))
            variances[k] = weights @ deviation / total
        elif mode is Mode.TRAIN:
            logger.debug(f"{kind}: component {k} absent from batch")
        units[k] = standardize(batch, means[k], variances[k], state.eps)
        x_hat += (weights * scale[k])[:, None, None, None] * units[k]

    out = affine(x_hat, state.gamma, state.beta)

    if mode is Mode.TRAIN:
        for k in np.flatnonzero(present):
            update_running(state, int(k), means[k], variances[k])
        state.batches_seen += 1

    cache = ForwardCache(kind=kind, mode=mode, x_hat=x_hat, unit=units, means=means,
                         variances=variances, counts=soft_counts, eps=state.eps,
                         lam=state.lam.copy(), posteriors=posteriors.copy(), present=present)
    return out, cache


def _per_sample_forward(batch: np.ndarray, gamma, beta, eps: float, axes: Tuple[int, ...],
                        kind: str) -> Tuple[np.ndarray, ForwardCache]:
    """Standardize over `axes` separately for each sample (LN) or plane (IN)."""
    require(eps > 0, ErrorCode.BAD_EPSILON, f"eps must be > 0, got {eps}")
    mean = batch.mean(axis=axes, keepdims=True)
    var = np.square(batch - mean).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    unit = (batch - mean) / np.sqrt(var + eps)
    out = affine(unit, gamma, beta)
    cache = ForwardCache(kind=kind, mode=Mode.TRAIN, x_hat=unit, unit=unit,
                         means=np.squeeze(mean, axis=axes), variances=np.squeeze(var, axis=axes),
                         counts=np.ones(batch.shape[0], dtype=np.int64), eps=eps,
                         lam=np.ones(1), inv_std=inv_std)
    return out, cache


def _per_sample_backward(cache: ForwardCache, grad_out, gamma, axes: Tuple[int, ...]):
    grad_out = np.asarray(grad_out, dtype=np.float64)
    check_same_shape(grad_out, cache.x_hat, "grad_out vs forward output")
    grad_beta = grad_out.sum(axis=CHANNEL_AXES)
    grad_gamma = (grad_out * cache.x_hat).sum(axis=CHANNEL_AXES)
    d_unit = grad_out * per_channel(np.asarray(gamma, dtype=np.float64))
    grad_in = _unit_backward(d_unit, cache.unit, cache.inv_std, axes)
    return grad_in, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# batch normalization


def bn_forward(batch, state: NormState, mode: Mode = Mode.TRAIN) -> Tuple[np.ndarray, ForwardCache]:
    """
    Batch normalization.

    Train normalizes with the batch moments and updates the running
    statistics; Eval normalizes with the running statistics and leaves the
    state untouched.
    """
    if state.k != 1:
        raise NormError(ErrorCode.WRONG_ARITY, f"batch normalization needs K=1, state has K={state.k}")
    batch = as_batch(batch)
    _check_channels(state, batch)
    indices = np.zeros(batch.shape[0], dtype=np.int64)
    return _grouped_forward(batch, indices, state, mode, kind="bn")


def bn_backward(cache: ForwardCache, grad_out, state: NormState):
    """Gradients (grad_in, grad_gamma, grad_beta) of batch normalization."""
    if state.k != 1:
        raise NormError(ErrorCode.WRONG_ARITY, f"batch normalization needs K=1, state has K={state.k}")
    return _grouped_backward(cache, grad_out, state)


# --------------------------------------------------------------------------
# supervised batch normalization


def sbn_forward(batch, assignment: ContextAssignment, state: NormState,
                mode: Mode = Mode.TRAIN) -> Tuple[np.ndarray, ForwardCache]:
    """
    Supervised batch normalization with known contexts.

    Train computes per-context moments over the context's samples in the
    batch, normalizes them with the 1/sqrt(lambda_k) factor and updates that
    context's running statistics; contexts absent from the batch are left
    untouched. Eval (known contexts) uses the running statistics.
    """
    if assignment.k != state.k:
        raise NormError(ErrorCode.WRONG_ARITY,
                        f"assignment has K={assignment.k}, layer state K={state.k}")
    batch = as_batch(batch)
    _check_channels(state, batch)
    indices = np.asarray(assignment.indices, dtype=np.int64)
    require(indices.shape[0] == batch.shape[0], ErrorCode.SHAPE_MISMATCH,
            f"assignment covers {indices.shape[0]} samples, batch has {batch.shape[0]}")
    if indices.size and (indices.min() < 0 or indices.max() >= state.k):
        raise NormError(ErrorCode.BAD_CONTEXT, f"context index outside [0, {state.k})")
    return _grouped_forward(batch, indices, state, mode, kind="sbn")


def sbn_backward(cache: ForwardCache, grad_out, state: NormState):
    """Groupwise batch-normalization gradients with the 1/sqrt(lambda_k) factor."""
    return _grouped_backward(cache, grad_out, state)


def context_posteriors(state: NormState, batch) -> np.ndarray:
    """
    Posterior p(k|x_n) from the layer's running statistics.

    Each context is a diagonal Gaussian with prior lambda_k, mean mu_bar_k and
    variance var_bar_k + eps, evaluated on the per-sample channel features.
    """
    batch = as_batch(batch)
    model = GmmModel(weights=state.lam, means=state.running_mean,
                     variances=np.maximum(state.running_var + state.eps, VARIANCE_FLOOR))
    return gmm_posterior(model, sample_features(batch))


def sbn_forward_eval_unknown(batch, state: NormState, posteriors,
                             with_cache: bool = False):
    """
    SBN inference when contexts are unknown: posterior-weighted sum of the
    per-context standardizations over running statistics. No state mutation.
    """
    batch = as_batch(batch)
    posteriors = _check_posteriors(posteriors, batch.shape[0], state.k)
    out, cache = _mixture_forward(batch, posteriors, state, Mode.EVAL, kind="sbn-unknown")
    return (out, cache) if with_cache else out


# --------------------------------------------------------------------------
# mixture normalization


def mn_forward(batch, gmm: GmmModel, state: NormState, mode: Mode = Mode.TRAIN,
               posteriors=None, with_cache: bool = False):
    """
    Mixture normalization.

    Posteriors come from `gmm` evaluated on the per-sample channel features,
    unless precomputed posteriors are supplied. Train estimates soft-count
    weighted moments per component and updates their running statistics;
    Eval aggregates over the running statistics.
    """
    if gmm.k != state.k:
        raise NormError(ErrorCode.WRONG_ARITY, f"mixture has K={gmm.k}, layer state K={state.k}")
    batch = as_batch(batch)
    _check_channels(state, batch)
    if posteriors is None:
        posteriors = gmm_posterior(gmm, sample_features(batch))
    posteriors = _check_posteriors(posteriors, batch.shape[0], state.k)
    out, cache = _mixture_forward(batch, posteriors, state, mode, kind="mn")
    return (out, cache) if with_cache else out


def mn_backward(cache: ForwardCache, grad_out, state: NormState):
    """
    Mixture-normalization gradients with posteriors held constant.

    Component moments are soft-count weighted functions of the batch, so each
    component contributes a weighted batch-normalization gradient.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    check_same_shape(grad_out, cache.x_hat, "grad_out vs forward output")
    require(cache.posteriors is not None, ErrorCode.INVALID_ARGUMENT,
            f"cache of kind {cache.kind} carries no posteriors")
    height, width = grad_out.shape[2], grad_out.shape[3]
    grad_beta = grad_out.sum(axis=CHANNEL_AXES)
    grad_gamma = (grad_out * cache.x_hat).sum(axis=CHANNEL_AXES)
    d_x_hat = grad_out * per_channel(state.gamma)
    scale = 1.0 / np.sqrt(cache.lam)

    grad_in = np.zeros_like(grad_out)
    for k in range(cache.posteriors.shape[1]):
        weights = cache.posteriors[:, k][:, None, None, None]
        d_unit = d_x_hat * weights * scale[k]
        inv_std = per_channel(1.0 / np.sqrt(cache.variances[k] + cache.eps))
        unit = cache.unit[k]
        if cache.mode is Mode.TRAIN and cache.present[k]:
            total = cache.counts[k] * height * width
            sum_d = d_unit.sum(axis=CHANNEL_AXES, keepdims=True)
            sum_du = (d_unit * unit).sum(axis=CHANNEL_AXES, keepdims=True)
            grad_in += inv_std * (d_unit - weights * sum_d / total - weights * unit * sum_du / total)
        else:
            grad_in += d_unit * inv_std
    return grad_in, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# layer and instance normalization


def ln_forward(batch, gamma, beta, eps: float = 1e-5, with_cache: bool = False):
    """Layer normalization: per-sample moments over (C, H, W). No running state."""
    batch = as_batch(batch)
    out, cache = _per_sample_forward(batch, gamma, beta, eps, axes=(1, 2, 3), kind="ln")
    return (out, cache) if with_cache else out


def ln_backward(cache: ForwardCache, grad_out, gamma):
    return _per_sample_backward(cache, grad_out, gamma, axes=(1, 2, 3))


def in_forward(batch, gamma, beta, eps: float = 1e-5, with_cache: bool = False):
    """
    Instance normalization: moments per (sample, channel) over (H, W).

    With H = W = 1 every plane has zero variance and the output is beta.
    """
    batch = as_batch(batch)
    out, cache = _per_sample_forward(batch, gamma, beta, eps, axes=(2, 3), kind="in")
    return (out, cache) if with_cache else out


def in_backward(cache: ForwardCache, grad_out, gamma):
    return _per_sample_backward(cache, grad_out, gamma, axes=(2, 3))
