"""
Feed-forward classifier used to compare normalization layers.

Each hidden layer is affine -> normalization -> ReLU; the output layer is a
plain affine map to class logits. Hidden activations of width
channels * spatial are viewed as (N, channels, spatial, 1) batches for the
normalization layer.
"""

import json
import logging
import os
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from context_builder.context_builder import ContextAssignment
from errors import ErrorCode, NormError, require
from gmm.mixture_model import GmmModel, gmm_posterior
from norm.norm_layers import (ForwardCache, Mode, bn_backward, bn_forward, context_posteriors,
                              in_backward, in_forward, ln_backward, ln_forward, mn_backward,
                              mn_forward, sbn_backward, sbn_forward, sbn_forward_eval_unknown)
from norm.norm_state import DEFAULT_EPS, DEFAULT_MOMENTUM, NormState
from numeric_core.arrays import as_batch, flatten_samples

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NormKind(Enum):
    """Normalization placed after each hidden affine map."""
    NONE = "none"
    BN = "bn"
    LN = "ln"
    IN = "in"
    MN = "mn"
    SBN = "sbn"


class Activation(Enum):
    RELU = "relu"
    NONE = "none"


@dataclass
class DenseLayer:
    """Affine map (out x in weights, out bias), optional normalization, activation."""
    weights: np.ndarray
    bias: np.ndarray
    norm: Optional[NormState] = None
    activation: Activation = Activation.RELU

    @property
    def in_features(self) -> int:
        return int(self.weights.shape[1])

    @property
    def out_features(self) -> int:
        return int(self.weights.shape[0])


@dataclass
class Mlp:
    """Stack of dense layers ending in `class_count` logits."""
    layers: List[DenseLayer]
    class_count: int
    norm_kind: NormKind = NormKind.NONE
    spatial: int = 1
    gmm: Optional[GmmModel] = None

    def __post_init__(self):
        require(len(self.layers) >= 1, ErrorCode.INVALID_ARGUMENT, "a model needs at least one layer")
        for previous, current in zip(self.layers, self.layers[1:]):
            require(previous.out_features == current.in_features, ErrorCode.SHAPE_MISMATCH,
                    f"layer widths do not chain: {previous.out_features} -> {current.in_features}")
        require(self.layers[-1].out_features == self.class_count, ErrorCode.SHAPE_MISMATCH,
                f"final width {self.layers[-1].out_features} != class_count {self.class_count}")
        if self.norm_kind is NormKind.MN:
            require(self.gmm is not None, ErrorCode.INVALID_ARGUMENT,
                    "mixture normalization needs an input-space mixture model")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_features

    @property
    def needs_contexts(self) -> bool:
        return self.norm_kind is NormKind.SBN

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable arrays by name; the arrays are the model's own (updates are in place)."""
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"layers.{i}.weights"] = layer.weights
            params[f"layers.{i}.bias"] = layer.bias
            if layer.norm is not None:
                params[f"layers.{i}.gamma"] = layer.norm.gamma
                params[f"layers.{i}.beta"] = layer.norm.beta
        return params


@dataclass
class LayerCache:
    inputs: np.ndarray
    norm_cache: Optional[ForwardCache] = None
    relu_mask: Optional[np.ndarray] = None


def build_mlp(input_dim: int, hidden: Sequence[int], class_count: int,
              norm_kind: NormKind = NormKind.BN, seed: int = 0, k: int = 1, lam=None,
              eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM, spatial: int = 1,
              gmm: Optional[GmmModel] = None) -> Mlp:
    """
    Build a model with He-scaled Gaussian weights, zero biases, gamma = 1 and beta = 0.

    Args:
        input_dim: feature dimension D
        hidden: hidden layer widths, each a multiple of `spatial`
        class_count: number of output classes
        norm_kind: normalization after each hidden affine map
        seed: initialization seed
        k, lam: contexts and their dataset proportions (SBN)
        gmm: input-space mixture (MN); its K and weights define the layer state
    """
    require(input_dim >= 1 and class_count >= 1, ErrorCode.INVALID_ARGUMENT,
            "input_dim and class_count must be >= 1")
    require(spatial >= 1, ErrorCode.INVALID_ARGUMENT, f"spatial must be >= 1, got {spatial}")
    rng = np.random.default_rng(seed)
    if norm_kind is NormKind.MN:
        require(gmm is not None, ErrorCode.INVALID_ARGUMENT, "mixture normalization needs a gmm")
        k, lam = gmm.k, gmm.weights
    elif norm_kind is not NormKind.SBN:
        k, lam = 1, None

    layers = []
    fan_in = input_dim
    for width in hidden:
        require(width % spatial == 0, ErrorCode.INVALID_ARGUMENT,
                f"hidden width {width} is not a multiple of spatial={spatial}")
        weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(width, fan_in))
        norm = None
        if norm_kind is not NormKind.NONE:
            norm = NormState.create(width // spatial, k=k, lam=lam, eps=eps, momentum=momentum)
        layers.append(DenseLayer(weights=weights, bias=np.zeros(width), norm=norm))
        fan_in = width

    weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(class_count, fan_in))
    layers.append(DenseLayer(weights=weights, bias=np.zeros(class_count),
                             activation=Activation.NONE))
    return Mlp(layers=layers, class_count=class_count, norm_kind=norm_kind,
               spatial=spatial, gmm=gmm if norm_kind is NormKind.MN else None)


def _as_inputs(model: Mlp, batch) -> np.ndarray:
    inputs = flatten_samples(as_batch(batch))
    require(inputs.shape[1] == model.input_dim, ErrorCode.SHAPE_MISMATCH,
            f"batch has {inputs.shape[1]} features, model expects {model.input_dim}")
    return inputs


def _norm_forward(model: Mlp, state: NormState, values: np.ndarray,
                  assignment: Optional[ContextAssignment], mode: Mode,
                  posteriors: Optional[np.ndarray], contexts_known: bool):
    kind = model.norm_kind
    if kind is NormKind.BN:
        return bn_forward(values, state, mode)
    if kind is NormKind.SBN:
        if mode is Mode.TRAIN or contexts_known:
            return sbn_forward(values, assignment, state, mode)
        return sbn_forward_eval_unknown(values, state, context_posteriors(state, values),
                                        with_cache=True)
    if kind is NormKind.MN:
        return mn_forward(values, model.gmm, state, mode, posteriors=posteriors, with_cache=True)
    if kind is NormKind.LN:
        return ln_forward(values, state.gamma, state.beta, state.eps, with_cache=True)
    return in_forward(values, state.gamma, state.beta, state.eps, with_cache=True)


def _norm_backward(cache: ForwardCache, grad: np.ndarray, state: NormState):
    if cache.kind == "bn":
        return bn_backward(cache, grad, state)
    if cache.kind == "sbn":
        return sbn_backward(cache, grad, state)
    if cache.kind in ("mn", "sbn-unknown"):
        return mn_backward(cache, grad, state)
    if cache.kind == "ln":
        return ln_backward(cache, grad, state.gamma)
    return in_backward(cache, grad, state.gamma)


def forward(model: Mlp, batch, assignment: Optional[ContextAssignment] = None,
            mode: Mode = Mode.TRAIN, contexts_known: bool = True) -> Tuple[np.ndarray, List[LayerCache]]:
    """
    Run the model on a batch.

    Args:
        model: the classifier
        batch: (N, D) or (N, D, 1, 1) inputs
        assignment: per-sample contexts, required by SBN layers
        mode: TRAIN uses batch statistics and updates running statistics
        contexts_known: in EVAL, False sends SBN layers through the
            posterior-weighted unknown-context branch

    Returns:
        (logits (N, class_count), per-layer caches)
    """
    x = _as_inputs(model, batch)
    if model.needs_contexts and assignment is None and (mode is Mode.TRAIN or contexts_known):
        raise NormError(ErrorCode.MISSING_CONTEXTS, "SBN layers need a context assignment")
    posteriors = gmm_posterior(model.gmm, x) if model.norm_kind is NormKind.MN else None

    caches = []
    for layer in model.layers:
        cache = LayerCache(inputs=x)
        z = x @ layer.weights.T + layer.bias
        if layer.norm is not None:
            n_samples = z.shape[0]
            values = z.reshape(n_samples, layer.norm.channels, model.spatial, 1)
            values, cache.norm_cache = _norm_forward(model, layer.norm, values, assignment, mode,
                                                     posteriors, contexts_known)
            z = values.reshape(n_samples, -1)
        if layer.activation is Activation.RELU:
            cache.relu_mask = z > 0
            z = z * cache.relu_mask
        caches.append(cache)
        x = z
    return x, caches


def softmax_cross_entropy(logits: np.ndarray, labels,
                          label_mask=None) -> Tuple[float, np.ndarray]:
    """
    Mean cross-entropy and its gradient with respect to the logits.

    With `label_mask`, only the masked rows enter the mean; the others get a
    zero gradient. No masked row gives loss 0.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n_samples, class_count = logits.shape
    require(labels.shape[0] == n_samples, ErrorCode.SHAPE_MISMATCH,
            f"{labels.shape[0]} labels for {n_samples} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise NormError(ErrorCode.BAD_LABEL, f"labels must lie in [0, {class_count})")
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    grad = np.exp(log_probs)
    grad[np.arange(n_samples), labels] -= 1.0
    if label_mask is None:
        loss = float(-log_probs[np.arange(n_samples), labels].mean())
        return loss, grad / n_samples

    weights = np.asarray(label_mask, dtype=bool).reshape(-1)
    require(weights.shape[0] == n_samples, ErrorCode.SHAPE_MISMATCH,
            f"label mask has {weights.shape[0]} entries for {n_samples} samples")
    count = int(weights.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)
    loss = float(-log_probs[np.arange(n_samples), labels][weights].sum() / count)
    return loss, grad * (weights[:, None] / count)


def loss_and_backprop(model: Mlp, batch, labels, assignment: Optional[ContextAssignment] = None,
                      weight_decay: float = 0.0,
                      label_mask=None) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Train-mode forward pass, mean cross-entropy and gradients for every parameter.

    `weight_decay` adds a coupled L2 term 0.5 * wd * ||W||^2 over the weight
    matrices; AdamW training passes 0 and decays inside the optimizer.
    `label_mask` restricts the loss to labelled rows; unlabelled rows still
    shape the batch statistics of every normalization layer.
    """
    logits, caches = forward(model, batch, assignment, Mode.TRAIN)
    loss, grad = softmax_cross_entropy(logits, labels, label_mask)
    grads = {}

    for i in reversed(range(len(model.layers))):
        layer, cache = model.layers[i], caches[i]
        if cache.relu_mask is not None:
            grad = grad * cache.relu_mask
        if layer.norm is not None:
            n_samples = grad.shape[0]
            grad4 = grad.reshape(n_samples, layer.norm.channels, model.spatial, 1)
            grad4, grads[f"layers.{i}.gamma"], grads[f"layers.{i}.beta"] = _norm_backward(
                cache.norm_cache, grad4, layer.norm)
            grad = grad4.reshape(n_samples, -1)
        grads[f"layers.{i}.weights"] = grad.T @ cache.inputs
        grads[f"layers.{i}.bias"] = grad.sum(axis=0)
        grad = grad @ layer.weights

    if weight_decay:
        for i, layer in enumerate(model.layers):
            loss += 0.5 * weight_decay * float(np.square(layer.weights).sum())
            grads[f"layers.{i}.weights"] = grads[f"layers.{i}.weights"] + weight_decay * layer.weights

    return loss, grads


def predict(model: Mlp, batch, assignment: Optional[ContextAssignment] = None,
            contexts_known: bool = True) -> np.ndarray:
    """Eval-mode class predictions."""
    logits, _ = forward(model, batch, assignment, Mode.EVAL, contexts_known)
    return np.argmax(logits, axis=1)


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_to_dict(model: Mlp) -> Dict[str, Any]:
    return {
        "version": CHECKPOINT_VERSION,
        "class_count": model.class_count,
        "spatial": model.spatial,
        "norm_kind": model.norm_kind.value,
        "layers": [
            {
                "weights": layer.weights.tolist(),
                "bias": layer.bias.tolist(),
                "activation": layer.activation.value,
                "norm": None if layer.norm is None else layer.norm.to_dict(),
            }
            for layer in model.layers
        ],
        "gmm": None if model.gmm is None else model.gmm.to_dict(),
    }


def checkpoint_from_dict(payload: Dict[str, Any]) -> Mlp:
    if payload.get("version") != CHECKPOINT_VERSION:
        raise NormError(ErrorCode.BAD_VERSION, f"unsupported checkpoint version {payload.get('version')!r}")
    layers = [
        DenseLayer(weights=np.asarray(item["weights"], dtype=np.float64),
                   bias=np.asarray(item["bias"], dtype=np.float64),
                   norm=None if item["norm"] is None else NormState.from_dict(item["norm"]),
                   activation=Activation(item["activation"]))
        for item in payload["layers"]
    ]
    gmm = None if payload.get("gmm") is None else GmmModel.from_dict(payload["gmm"])
    return Mlp(layers=layers, class_count=int(payload["class_count"]),
               norm_kind=NormKind(payload["norm_kind"]), spatial=int(payload["spatial"]), gmm=gmm)


def save_checkpoint(model: Mlp, path: str) -> str:
    """Write the model as JSON (exact at double precision)."""
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8") as handle:
        json.dump(checkpoint_to_dict(model), handle)
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: str) -> Mlp:
    with open(path, "r", encoding="utf-8") as handle:
        return checkpoint_from_dict(json.load(handle))
