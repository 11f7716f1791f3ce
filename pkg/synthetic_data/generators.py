"""
Synthetic datasets with controllable heterogeneity.

Every generator is a pure function of its arguments: features are drawn
from a numpy Generator seeded with `seed`, with unit isotropic noise around
class means. Heterogeneity comes only from the context/domain shift
parameters.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from errors import DataError, ErrorCode, require

logger = logging.getLogger(__name__)

DEFAULT_MAX_ATTEMPTS = 1000


@dataclass
class Dataset:
    """Features (N, D), class labels, optional ground-truth contexts and metadata."""
    features: np.ndarray
    class_labels: np.ndarray
    context_labels: Optional[np.ndarray] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64).reshape(-1)
        if self.context_labels is not None:
            self.context_labels = np.asarray(self.context_labels, dtype=np.int64).reshape(-1)
        n_samples = self.features.shape[0]
        require(self.class_labels.shape[0] == n_samples, ErrorCode.SHAPE_MISMATCH,
                f"{self.class_labels.shape[0]} class labels for {n_samples} samples", DataError)
        require(self.context_labels is None or self.context_labels.shape[0] == n_samples,
                ErrorCode.SHAPE_MISMATCH, "context labels do not match the sample count", DataError)
        require(bool(np.all(np.isfinite(self.features))), ErrorCode.NON_FINITE,
                "features contain NaN or Inf", DataError)
        self.meta.setdefault("classes", int(self.class_labels.max()) + 1 if n_samples else 0)
        if n_samples:
            require(int(self.class_labels.min()) >= 0 and int(self.class_labels.max()) < self.classes,
                    ErrorCode.BAD_LABEL, f"class labels must lie in [0, {self.classes})", DataError)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def classes(self) -> int:
        return int(self.meta["classes"])

    @property
    def k_true(self) -> Optional[int]:
        return self.meta.get("k_true")

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        contexts = None if self.context_labels is None else self.context_labels[rows]
        return Dataset(features=self.features[rows], class_labels=self.class_labels[rows],
                       context_labels=contexts, meta=dict(self.meta))


def _check_positive(**values):
    for name, value in values.items():
        if not value > 0:
            raise DataError(ErrorCode.INVALID_ARGUMENT, f"{name} must be > 0, got {value!r}")


def pack_centers(count: int, dim: int, separation: float, rng: np.random.Generator,
                 half_width: Optional[float] = None,
                 max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> np.ndarray:
    """
    Draw `count` points in [-half_width, half_width]^dim with pairwise
    distance >= separation by rejection sampling.

    half_width defaults to separation * count^(1/dim). Each point gets
    `max_attempts` draws; exhausting them raises packing-failed.
    """
    if half_width is None:
        half_width = separation * count ** (1.0 / dim)
    centers = np.zeros((count, dim))
    if count == 1:
        return centers
    for i in range(count):
        for _ in range(max_attempts):
            candidate = rng.uniform(-half_width, half_width, size=dim)
            if i == 0 or np.min(np.linalg.norm(centers[:i] - candidate, axis=1)) >= separation:
                centers[i] = candidate
                break
        else:
            raise DataError(ErrorCode.PACKING_FAILED,
                            f"could not place {count} centers {separation} apart in "
                            f"[-{half_width:g}, {half_width:g}]^{dim} after {max_attempts} attempts")
    return centers


def class_offsets(classes: int, dim: int, margin: float, rng: np.random.Generator) -> np.ndarray:
    """
    Class mean offsets of length `margin`.

    Orthogonal directions when classes <= dim (pairwise distance margin * sqrt(2)),
    otherwise independent random unit directions.
    """
    if classes <= dim:
        basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        directions = basis[:, :classes].T
    else:
        directions = rng.normal(size=(classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return margin * directions


def gen_mixture_classification(k: int, classes: int, n_per_context: int, dim: int,
                               context_shift: float, class_margin: float, seed: int = 0,
                               half_width: Optional[float] = None,
                               max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> Dataset:
    """
    K contexts, each holding every class.

    Context centers are at least `context_shift` apart; within a context, class
    means sit at `class_margin` from the center along directions shared by all
    contexts. The same class thus has different feature statistics per
    context. Classes are balanced within a context (round robin).
    """
    require(min(k, classes, n_per_context, dim) >= 1, ErrorCode.INVALID_ARGUMENT,
            "k, classes, n_per_context and dim must be >= 1", DataError)
    _check_positive(context_shift=context_shift, class_margin=class_margin)
    rng = np.random.default_rng(seed)
    centers = pack_centers(k, dim, context_shift, rng, half_width, max_attempts)
    offsets = class_offsets(classes, dim, class_margin, rng)

    labels = np.tile(np.arange(n_per_context) % classes, k)
    contexts = np.repeat(np.arange(k), n_per_context)
    features = centers[contexts] + offsets[labels] + rng.normal(size=(k * n_per_context, dim))

    logger.info(f"Generated mixture_classification: K={k}, classes={classes}, "
                f"N={features.shape[0]}, D={dim}")
    return Dataset(features=features, class_labels=labels, context_labels=contexts,
                   meta={"generator": "mixture_classification", "k_true": k, "seed": seed,
                         "classes": classes})


def gen_domain_shift(classes: int, n_source: int, n_target: int, dim: int,
                     scale_shift: float, mean_shift: float, seed: int = 0,
                     class_margin: float = 3.0) -> Tuple[Dataset, Dataset]:
    """
    Source and target domains with the same class-conditional structure.

    Target features are source-distributed draws mapped through
    x -> scale_shift * x + mean_shift. Context labels are the domain id
    (0 source, 1 target).
    """
    require(min(classes, n_source, n_target, dim) >= 1, ErrorCode.INVALID_ARGUMENT,
            "classes, n_source, n_target and dim must be >= 1", DataError)
    _check_positive(scale_shift=scale_shift, class_margin=class_margin)
    rng = np.random.default_rng(seed)
    offsets = class_offsets(classes, dim, class_margin, rng)

    def draw(count: int) -> Tuple[np.ndarray, np.ndarray]:
        labels = np.arange(count) % classes
        return offsets[labels] + rng.normal(size=(count, dim)), labels

    source_x, source_y = draw(n_source)
    target_x, target_y = draw(n_target)
    target_x = scale_shift * target_x + mean_shift

    meta = {"generator": "domain_shift", "k_true": 2, "seed": seed, "classes": classes,
            "scale_shift": scale_shift, "mean_shift": mean_shift}
    source = Dataset(features=source_x, class_labels=source_y,
                     context_labels=np.zeros(n_source, dtype=np.int64), meta=dict(meta))
    target = Dataset(features=target_x, class_labels=target_y,
                     context_labels=np.ones(n_target, dtype=np.int64), meta=dict(meta))
    logger.info(f"Generated domain_shift: {n_source} source / {n_target} target samples, "
                f"scale {scale_shift}, shift {mean_shift}")
    return source, target


def gen_superclass_classification(superclasses: int, classes_per_superclass: int,
                                  n_per_class: int, dim: int, superclass_shift: float,
                                  class_margin: float, seed: int = 0,
                                  max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> Dataset:
    """
    Classes nested inside superclasses; context labels record the superclass.

    Class c of superclass s has label s * classes_per_superclass + c.
    """
    require(min(superclasses, classes_per_superclass, n_per_class, dim) >= 1,
            ErrorCode.INVALID_ARGUMENT,
            "superclasses, classes_per_superclass, n_per_class and dim must be >= 1", DataError)
    _check_positive(superclass_shift=superclass_shift, class_margin=class_margin)
    rng = np.random.default_rng(seed)
    centers = pack_centers(superclasses, dim, superclass_shift, rng, max_attempts=max_attempts)

    features, labels, contexts = [], [], []
    for s in range(superclasses):
        offsets = class_offsets(classes_per_superclass, dim, class_margin, rng)
        for c in range(classes_per_superclass):
            features.append(centers[s] + offsets[c] + rng.normal(size=(n_per_class, dim)))
            labels.append(np.full(n_per_class, s * classes_per_superclass + c))
            contexts.append(np.full(n_per_class, s))

    classes = superclasses * classes_per_superclass
    logger.info(f"Generated superclass_classification: {superclasses} superclasses x "
                f"{classes_per_superclass} classes, D={dim}")
    return Dataset(features=np.concatenate(features), class_labels=np.concatenate(labels),
                   context_labels=np.concatenate(contexts),
                   meta={"generator": "superclass_classification", "k_true": superclasses,
                         "seed": seed, "classes": classes})


def combine_domains(source: Dataset, target: Dataset) -> Dataset:
    """Concatenate two domains; context labels become the domain id."""
    require(source.dim == target.dim, ErrorCode.SHAPE_MISMATCH,
            f"domains have dimensions {source.dim} and {target.dim}", DataError)
    meta = dict(source.meta)
    meta.update(k_true=2, classes=max(source.classes, target.classes), n_source=source.n)
    contexts = np.concatenate([np.zeros(source.n, dtype=np.int64),
                               np.ones(target.n, dtype=np.int64)])
    return Dataset(features=np.concatenate([source.features, target.features]),
                   class_labels=np.concatenate([source.class_labels, target.class_labels]),
                   context_labels=contexts, meta=meta)


GENERATORS = {
    "mixture_classification": gen_mixture_classification,
    "superclass_classification": gen_superclass_classification,
}


def generate(generator: str, params: Dict[str, Any]) -> Dataset:
    """Build a dataset from a generator name and keyword parameters."""
    if generator != "domain_shift" and generator not in GENERATORS:
        raise DataError(ErrorCode.INVALID_ARGUMENT,
                        f"unknown generator {generator!r}; expected one of "
                        f"{sorted([*GENERATORS, 'domain_shift'])}")
    try:
        if generator == "domain_shift":
            return combine_domains(*gen_domain_shift(**params))
        return GENERATORS[generator](**params)
    except TypeError as exc:
        raise DataError(ErrorCode.INVALID_ARGUMENT, f"bad parameters for {generator}: {exc}") from exc
