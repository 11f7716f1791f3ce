"""
Context construction for supervised batch normalization.

Contexts come from explicit labels (domains, superclasses) or from k-means
clusters of the inputs. Every path produces a ContextAssignment carrying the
per-sample context index, K, and the dataset-level proportions lambda.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from errors import ErrorCode, NormError, require

logger = logging.getLogger(__name__)

LAMBDA_TOLERANCE = 1e-9
DEFAULT_N_INIT = 10


@dataclass(frozen=True)
class ContextAssignment:
    """Per-sample context indices plus K and the proportions lambda."""
    indices: np.ndarray
    k: int
    lam: np.ndarray

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        require(self.k >= 1, ErrorCode.INVALID_ARGUMENT, f"K must be >= 1, got {self.k}")
        require(lam.shape[0] == self.k, ErrorCode.SHAPE_MISMATCH,
                f"lambda has length {lam.shape[0]}, expected K={self.k}")
        if indices.size:
            require(int(indices.min()) >= 0 and int(indices.max()) < self.k,
                    ErrorCode.BAD_CONTEXT, f"context indices must lie in [0, {self.k})")
        require(bool(np.all(lam > 0)), ErrorCode.EMPTY_CONTEXT,
                "every context needs a positive proportion")
        require(abs(float(lam.sum()) - 1.0) <= LAMBDA_TOLERANCE, ErrorCode.INVALID_ARGUMENT,
                f"lambda must sum to 1, got {lam.sum()!r}")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "lam", lam)

    @property
    def n(self) -> int:
        return int(self.indices.shape[0])

    def counts(self) -> np.ndarray:
        """Number of samples per context in this assignment."""
        return np.bincount(self.indices, minlength=self.k)

    def subset(self, rows: np.ndarray) -> "ContextAssignment":
        """Assignment restricted to `rows`, keeping the dataset-level lambda."""
        return ContextAssignment(indices=self.indices[rows], k=self.k, lam=self.lam)

    def one_hot(self) -> np.ndarray:
        """(N, K) posterior matrix with p(k|x_n) = 1 for the assigned context."""
        posteriors = np.zeros((self.n, self.k))
        posteriors[np.arange(self.n), self.indices] = 1.0
        return posteriors


@dataclass(frozen=True)
class KMeansModel:
    """Fitted k-means centroids."""
    centroids: np.ndarray
    inertia: float
    iterations_run: int
    proportions: Optional[np.ndarray] = None
    inertia_trace: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        centroids = np.atleast_2d(np.asarray(self.centroids, dtype=np.float64))
        require(bool(np.all(np.isfinite(centroids))), ErrorCode.NON_FINITE,
                "centroids contain NaN or Inf")
        require(self.inertia >= 0, ErrorCode.INVALID_ARGUMENT, "inertia must be >= 0")
        object.__setattr__(self, "centroids", centroids)
        if self.proportions is not None:
            object.__setattr__(self, "proportions",
                               np.asarray(self.proportions, dtype=np.float64))

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    def to_dict(self) -> Dict[str, Any]:
        payload = {
            "k": self.k,
            "dim": self.dim,
            "centroids": self.centroids.tolist(),
            "inertia": float(self.inertia),
            "iterations_run": int(self.iterations_run),
        }
        if self.proportions is not None:
            payload["proportions"] = self.proportions.tolist()
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "KMeansModel":
        centroids = np.asarray(payload["centroids"], dtype=np.float64).reshape(
            int(payload["k"]), int(payload["dim"]))
        proportions = payload.get("proportions")
        return cls(centroids=centroids,
                   inertia=float(payload.get("inertia", 0.0)),
                   iterations_run=int(payload.get("iterations_run", 0)),
                   proportions=None if proportions is None else np.asarray(proportions))


def context_proportions(indices, k: int) -> np.ndarray:
    """
    Dataset-level proportion of samples per context.

    Raises empty-context when any of the K contexts has no sample, because
    lambda_k enters the layer transform as 1/sqrt(lambda_k).
    """
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    require(indices.size >= 1, ErrorCode.EMPTY_SELECTION, "no indices given")
    require(int(indices.min()) >= 0 and int(indices.max()) < k, ErrorCode.BAD_CONTEXT,
            f"context indices must lie in [0, {k})")
    counts = np.bincount(indices, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise NormError(ErrorCode.EMPTY_CONTEXT, f"contexts {empty.tolist()} have no samples")
    return counts / indices.shape[0]


def contexts_from_labels(labels) -> ContextAssignment:
    """
    Map arbitrary integer labels to dense context indices.

    Distinct label values are numbered 0..K-1 in order of first appearance.
    """
    labels = np.asarray(labels).reshape(-1)
    require(labels.size >= 1, ErrorCode.EMPTY_SELECTION, "no labels given")
    _, first_index, inverse = np.unique(labels, return_index=True, return_inverse=True)
    # np.unique sorts by value; renumber by first appearance
    order = np.argsort(first_index, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.shape[0])
    indices = rank[inverse.reshape(-1)]
    k = int(order.shape[0])
    return ContextAssignment(indices=indices, k=k, lam=context_proportions(indices, k))


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(M, K) squared Euclidean distances."""
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("mkd,mkd->mk", diff, diff)


def kmeans_plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new centroid drawn with probability ~ D(x)^2."""
    n_samples = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(0, n_samples)]

    for i in range(1, k):
        dist_sq = _squared_distances(points, centroids[:i]).min(axis=1)
        total = dist_sq.sum()
        if total > 0:
            next_idx = rng.choice(n_samples, p=dist_sq / total)
        else:
            next_idx = rng.integers(0, n_samples)
        centroids[i] = points[next_idx]

    return centroids


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int,
           tol: float) -> Tuple[np.ndarray, int, List[float]]:
    """Lloyd iterations from the given centroids; returns (centroids, iterations, trace)."""
    n_samples, k = points.shape[0], centroids.shape[0]
    trace = []
    iterations = 0

    for iterations in range(1, max(max_iter, 1) + 1):
        distances = _squared_distances(points, centroids)
        labels = np.argmin(distances, axis=1)
        trace.append(float(distances[np.arange(n_samples), labels].sum()))

        new_centroids = centroids.copy()
        for j in range(k):
            members = labels == j
            if np.any(members):
                new_centroids[j] = points[members].mean(axis=0)

        # repair empty clusters with the point farthest from its centroid
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            own = _squared_distances(points, new_centroids)[np.arange(n_samples), labels]
            farthest = int(np.argmax(own))
            logger.warning(f"k-means cluster {j} empty at iteration {iterations}; "
                           f"reseeding from point {farthest}")
            new_centroids[j] = points[farthest]
            labels[farthest] = j

        shift = float(np.sqrt(np.square(new_centroids - centroids).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break

    distances = _squared_distances(points, centroids)
    trace.append(float(distances.min(axis=1).sum()))
    return centroids, iterations, trace


def kmeans_fit(points, k: int, max_iter: int = 100, tol: float = 1e-4,
               seed: int = 0, n_init: int = DEFAULT_N_INIT) -> KMeansModel:
    """
    Fit k-means with k-means++ seeding and Lloyd iterations.

    Args:
        points: (N, D) matrix
        k: number of clusters
        max_iter: maximum Lloyd iterations per start
        tol: stop once the largest centroid shift falls below tol
        seed: seed for the k-means++ draws
        n_init: number of k-means++ starts; all draw from one generator
            seeded with `seed`, and the lowest final inertia wins (earliest
            start on ties)

    Returns:
        KMeansModel of the winning start, with its inertia trace (one entry
        per assignment step)
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    require(bool(np.all(np.isfinite(points))), ErrorCode.NON_FINITE, "points contain NaN or Inf")
    require(k >= 1, ErrorCode.INVALID_ARGUMENT, f"K must be >= 1, got {k}")
    require(tol >= 0, ErrorCode.INVALID_ARGUMENT, f"tol must be >= 0, got {tol}")
    require(n_init >= 1, ErrorCode.INVALID_ARGUMENT, f"n_init must be >= 1, got {n_init}")
    n_samples = points.shape[0]
    if n_samples < k:
        raise NormError(ErrorCode.TOO_FEW_POINTS, f"{n_samples} points cannot form {k} clusters")

    rng = np.random.default_rng(seed)
    best = None
    for start in range(n_init):
        centroids, iterations, trace = _lloyd(points, kmeans_plusplus_init(points, k, rng),
                                              max_iter, tol)
        logger.debug(f"k-means start {start}: inertia {trace[-1]:.6g} after {iterations} iterations")
        if best is None or trace[-1] < best[2][-1]:
            best = (centroids, iterations, trace)
    centroids, iterations, trace = best

    labels = np.argmin(_squared_distances(points, centroids), axis=1)
    counts = np.bincount(labels, minlength=k)
    proportions = counts / n_samples if np.all(counts > 0) else None
    inertia = trace[-1]

    logger.info(f"k-means fit: K={k}, starts={n_init}, iterations={iterations}, "
                f"inertia={inertia:.6g}")
    return KMeansModel(centroids=centroids, inertia=inertia, iterations_run=iterations,
                       proportions=proportions, inertia_trace=tuple(trace))


def kmeans_labels(model: KMeansModel, points) -> np.ndarray:
    """Nearest-centroid index per point; ties go to the lowest index."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    require(points.shape[1] == model.dim, ErrorCode.SHAPE_MISMATCH,
            f"points have dimension {points.shape[1]}, centroids {model.dim}")
    # argmin returns the first minimum
    return np.argmin(_squared_distances(points, model.centroids), axis=1)


def kmeans_assign(model: KMeansModel, points) -> ContextAssignment:
    """
    Assign points to their nearest centroid.

    lambda is computed over these points; when some centroid receives none of
    them, the fit-time proportions stored on the model are used instead so
    that every context keeps a positive proportion.
    """
    indices = kmeans_labels(model, points)
    counts = np.bincount(indices, minlength=model.k)
    if np.all(counts > 0):
        lam = counts / indices.shape[0]
    elif model.proportions is not None:
        logger.debug("some clusters received no points; using fit-time proportions")
        lam = model.proportions
    else:
        raise NormError(ErrorCode.EMPTY_CONTEXT,
                        "clusters without points and no fit-time proportions available")
    return ContextAssignment(indices=indices, k=model.k, lam=lam)
