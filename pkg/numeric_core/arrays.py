"""
Dense-array primitives used by every normalization layer.

A batch is a float64 numpy array of shape (N, C, H, W). Vector data of
dimension D is carried as (N, D, 1, 1). Channel vectors are 1-D arrays of
length C.
"""

import logging
from typing import Optional, Tuple

import numpy as np

from errors import ErrorCode, NormError, require

logger = logging.getLogger(__name__)

# Reductions that pool samples and spatial positions per channel.
CHANNEL_AXES = (0, 2, 3)


def as_batch(values, check_finite: bool = True) -> np.ndarray:
    """
    Validate and convert input into a (N, C, H, W) float64 batch.

    Args:
        values: array-like of rank 2 (N, D) or rank 4 (N, C, H, W)
        check_finite: reject NaN/Inf values

    Returns:
        A float64 array of rank 4
    """
    batch = np.asarray(values, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch.reshape(batch.shape[0], batch.shape[1], 1, 1)
    require(batch.ndim == 4, ErrorCode.SHAPE_MISMATCH,
            f"batch must have rank 2 or 4, got shape {batch.shape}")
    require(all(dim >= 1 for dim in batch.shape), ErrorCode.SHAPE_MISMATCH,
            f"every batch dimension must be >= 1, got {batch.shape}")
    if check_finite:
        require(bool(np.all(np.isfinite(batch))), ErrorCode.NON_FINITE,
                "batch contains NaN or Inf")
    return batch


def as_channel_vector(values, channels: int, name: str = "vector") -> np.ndarray:
    """Validate a per-channel vector of length `channels`."""
    vector = np.asarray(values, dtype=np.float64).reshape(-1)
    require(vector.shape[0] == channels, ErrorCode.SHAPE_MISMATCH,
            f"{name} has length {vector.shape[0]}, expected {channels}")
    require(bool(np.all(np.isfinite(vector))), ErrorCode.NON_FINITE,
            f"{name} contains NaN or Inf")
    return vector


def per_channel(vector: np.ndarray) -> np.ndarray:
    """Broadcast a channel vector against a (N, C, H, W) batch."""
    return vector[None, :, None, None]


def channel_moments(batch: np.ndarray,
                    sample_mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-channel mean and biased variance over samples and spatial positions.

    Args:
        batch: (N, C, H, W) batch
        sample_mask: optional boolean vector of length N selecting samples

    Returns:
        (mean, var) channel vectors
    """
    batch = np.asarray(batch, dtype=np.float64)
    require(bool(np.all(np.isfinite(batch))), ErrorCode.NON_FINITE,
            "batch contains NaN or Inf")
    if sample_mask is not None:
        mask = np.asarray(sample_mask, dtype=bool).reshape(-1)
        require(mask.shape[0] == batch.shape[0], ErrorCode.SHAPE_MISMATCH,
                f"mask length {mask.shape[0]} does not match N={batch.shape[0]}")
        batch = batch[mask]
    require(batch.shape[0] >= 1, ErrorCode.EMPTY_SELECTION, "no samples selected")

    # two-pass: mean first, then squared deviations
    mean = batch.mean(axis=CHANNEL_AXES)
    var = np.square(batch - per_channel(mean)).mean(axis=CHANNEL_AXES)
    return mean, var


def standardize(batch: np.ndarray, mean: np.ndarray, var: np.ndarray, eps: float) -> np.ndarray:
    """(x - mean[c]) / sqrt(var[c] + eps) elementwise."""
    require(eps > 0, ErrorCode.BAD_EPSILON, f"eps must be > 0, got {eps}")
    batch = np.asarray(batch, dtype=np.float64)
    channels = batch.shape[1]
    mean = as_channel_vector(mean, channels, "mean")
    var = as_channel_vector(var, channels, "var")
    return (batch - per_channel(mean)) / per_channel(np.sqrt(var + eps))


def affine(batch: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """scale[c] * x + shift[c] elementwise."""
    batch = np.asarray(batch, dtype=np.float64)
    channels = batch.shape[1]
    scale = as_channel_vector(scale, channels, "scale")
    shift = as_channel_vector(shift, channels, "shift")
    return per_channel(scale) * batch + per_channel(shift)


def sample_features(batch: np.ndarray) -> np.ndarray:
    """Per-sample channel features (N, C): the spatial average of each channel."""
    batch = np.asarray(batch, dtype=np.float64)
    return batch.mean(axis=(2, 3))


def flatten_samples(batch: np.ndarray) -> np.ndarray:
    """View a batch as an (N, C*H*W) matrix."""
    batch = np.asarray(batch, dtype=np.float64)
    return batch.reshape(batch.shape[0], -1)


def check_same_shape(left: np.ndarray, right: np.ndarray, what: str = "arrays"):
    """Raise shape-mismatch unless both arrays share one shape."""
    if np.shape(left) != np.shape(right):
        raise NormError(ErrorCode.SHAPE_MISMATCH,
                        f"{what}: shape {np.shape(left)} != {np.shape(right)}")
