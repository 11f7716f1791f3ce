"""
Diagonal-Gaussian mixture models fitted by Expectation-Maximization.

Used by mixture normalization (posterior-weighted aggregation over
components) and by the unknown-context inference branch of supervised batch
normalization.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

import numpy as np
from scipy.special import logsumexp

from context_builder.context_builder import kmeans_fit
from errors import ErrorCode, NormError, require

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
WEIGHT_TOLERANCE = 1e-9
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GmmModel:
    """K diagonal Gaussian components: weights (K,), means (K, D), variances (K, D)."""
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood_trace: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        k = weights.shape[0]
        require(k >= 1, ErrorCode.INVALID_ARGUMENT, "a mixture needs at least one component")
        require(means.shape[0] == k and variances.shape == means.shape, ErrorCode.SHAPE_MISMATCH,
                f"weights {weights.shape}, means {means.shape}, variances {variances.shape} disagree")
        require(bool(np.all(np.isfinite(means)) and np.all(np.isfinite(variances))),
                ErrorCode.NON_FINITE, "mixture parameters contain NaN or Inf")
        require(bool(np.all(weights > 0)), ErrorCode.INVALID_ARGUMENT,
                "every mixture weight must be > 0")
        require(abs(float(weights.sum()) - 1.0) <= WEIGHT_TOLERANCE, ErrorCode.INVALID_ARGUMENT,
                f"mixture weights must sum to 1, got {weights.sum()!r}")
        require(bool(np.all(variances >= VARIANCE_FLOOR)), ErrorCode.INVALID_ARGUMENT,
                f"variances must be >= {VARIANCE_FLOOR}")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)

    @property
    def k(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "vars": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "GmmModel":
        model = cls(weights=payload["weights"], means=payload["means"],
                    variances=payload["vars"])
        require(model.k == int(payload["k"]), ErrorCode.SHAPE_MISMATCH,
                f"k={payload['k']} does not match {model.k} components")
        return model


def _as_points(model: GmmModel, points) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    require(points.shape[1] == model.dim, ErrorCode.SHAPE_MISMATCH,
            f"points have dimension {points.shape[1]}, mixture {model.dim}")
    return points


def weighted_log_densities(model: GmmModel, points) -> np.ndarray:
    """(M, K) matrix of log(lambda_k) + log N(x_m; mu_k, diag var_k)."""
    points = _as_points(model, points)
    diff = points[:, None, :] - model.means[None, :, :]
    mahalanobis = np.einsum("mkd,mkd->mk", diff / model.variances[None, :, :], diff)
    log_det = np.log(model.variances).sum(axis=1)
    log_norm = -0.5 * (model.dim * LOG_2PI + log_det)
    return np.log(model.weights)[None, :] + log_norm[None, :] - 0.5 * mahalanobis


def gmm_posterior(model: GmmModel, points) -> np.ndarray:
    """
    Posterior p(k|x) for each point, computed in log space.

    Returns:
        (M, K) responsibilities; each row sums to 1
    """
    log_prob = weighted_log_densities(model, points)
    # logsumexp subtracts the row maximum before exponentiating
    log_resp = log_prob - logsumexp(log_prob, axis=1, keepdims=True)
    resp = np.exp(log_resp)
    return resp / resp.sum(axis=1, keepdims=True)


def gmm_log_likelihood(model: GmmModel, points) -> float:
    """Sum over points of log sum_k lambda_k N(x; mu_k, diag var_k)."""
    return float(logsumexp(weighted_log_densities(model, points), axis=1).sum())


def _m_step(points: np.ndarray, resp: np.ndarray) -> GmmModel:
    """Soft-count weighted means and variances, weights = mean responsibility."""
    soft_counts = resp.sum(axis=0) + 10 * np.finfo(np.float64).eps
    weights = soft_counts / soft_counts.sum()
    means = resp.T @ points / soft_counts[:, None]
    variances = np.empty_like(means)
    for k in range(resp.shape[1]):
        deviation = points - means[k]
        variances[k] = resp[:, k] @ np.square(deviation) / soft_counts[k]
    return GmmModel(weights=weights, means=means,
                    variances=np.maximum(variances, VARIANCE_FLOOR))


def gmm_fit_em(points, k: int, max_iter: int = 100, tol: float = 1e-8,
               seed: int = 0) -> GmmModel:
    """
    Fit a diagonal-Gaussian mixture by EM.

    Means start at k-means centroids (same seed), weights uniform, variances
    at the per-dimension global variance. Iterates until the log-likelihood
    improvement drops below `tol` or `max_iter` M-steps have run.

    Returns:
        GmmModel whose `log_likelihood_trace` holds one value per E-step
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    require(bool(np.all(np.isfinite(points))), ErrorCode.NON_FINITE, "points contain NaN or Inf")
    require(tol >= 0, ErrorCode.INVALID_ARGUMENT, f"tol must be >= 0, got {tol}")
    require(max_iter >= 1, ErrorCode.INVALID_ARGUMENT, f"max_iter must be >= 1, got {max_iter}")
    n_samples, dim = points.shape
    if n_samples < k:
        raise NormError(ErrorCode.TOO_FEW_POINTS, f"{n_samples} points cannot fit {k} components")

    centroids = kmeans_fit(points, k, seed=seed).centroids
    global_var = np.maximum(points.var(axis=0), VARIANCE_FLOOR)
    model = GmmModel(weights=np.full(k, 1.0 / k), means=centroids,
                     variances=np.tile(global_var, (k, 1)))

    trace = []
    converged = False
    for iteration in range(max_iter):
        log_likelihood = gmm_log_likelihood(model, points)
        trace.append(log_likelihood)
        logger.debug(f"EM iteration {iteration}: log-likelihood {log_likelihood:.10g}")
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            converged = True
            break
        model = _m_step(points, gmm_posterior(model, points))

    if not converged:
        trace.append(gmm_log_likelihood(model, points))
        logger.warning(f"EM stopped after max_iter={max_iter} without converging")

    logger.info(f"EM fit: K={k}, D={dim}, iterations={len(trace) - 1}, "
                f"log-likelihood={trace[-1]:.6g}")
    return GmmModel(weights=model.weights, means=model.means, variances=model.variances,
                    log_likelihood_trace=tuple(trace))
