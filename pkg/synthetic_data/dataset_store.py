"""
Dataset persistence.

A dataset file is a single JSON document:
{"version": 1, "dim", "classes", "features": [[...]], "class_labels": [...],
 "context_labels": [...] | null, "meta": {...}}
"""

import json
import logging
import os
from typing import Any, Dict

import numpy as np

from errors import DataError, ErrorCode
from synthetic_data.generators import Dataset

logger = logging.getLogger(__name__)

DATASET_VERSION = 1
REQUIRED_FIELDS = ("dim", "classes", "features", "class_labels")


def dataset_to_dict(ds: Dataset) -> Dict[str, Any]:
    return {
        "version": DATASET_VERSION,
        "dim": ds.dim,
        "classes": ds.classes,
        "features": ds.features.tolist(),
        "class_labels": ds.class_labels.tolist(),
        "context_labels": None if ds.context_labels is None else ds.context_labels.tolist(),
        "meta": ds.meta,
    }


def _integer_labels(values, name: str) -> np.ndarray:
    labels = np.asarray(values, dtype=np.float64).reshape(-1)
    bad = np.flatnonzero(~np.isfinite(labels) | (labels != np.round(labels)))
    if bad.size:
        raise DataError(ErrorCode.PARSE_ERROR,
                        f"{name}[{int(bad[0])}] = {float(labels[bad[0]])} is not an integer")
    return labels.astype(np.int64)


def dataset_from_dict(payload: Dict[str, Any]) -> Dataset:
    if not isinstance(payload, dict):
        raise DataError(ErrorCode.PARSE_ERROR, "dataset file must hold a JSON object")
    if payload.get("version") != DATASET_VERSION:
        raise DataError(ErrorCode.BAD_VERSION,
                        f"unsupported dataset version {payload.get('version')!r}, "
                        f"expected {DATASET_VERSION}")
    missing = [name for name in REQUIRED_FIELDS if name not in payload]
    if missing:
        raise DataError(ErrorCode.PARSE_ERROR, f"dataset file is missing {missing}")

    dim = int(payload["dim"])
    features = np.asarray(payload["features"], dtype=np.float64)
    if features.size == 0:
        features = features.reshape(0, dim)
    if features.ndim != 2 or features.shape[1] != dim:
        raise DataError(ErrorCode.PARSE_ERROR,
                        f"features have shape {features.shape}, expected (N, {dim})")
    meta = dict(payload.get("meta") or {})
    meta["classes"] = int(payload["classes"])
    context_labels = payload.get("context_labels")
    return Dataset(features=features,
                   class_labels=_integer_labels(payload["class_labels"], "class_labels"),
                   context_labels=None if context_labels is None
                   else _integer_labels(context_labels, "context_labels"),
                   meta=meta)


def save_dataset(ds: Dataset, path: str) -> str:
    """Write `ds` to `path` atomically (temporary file, then rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8") as handle:
        json.dump(dataset_to_dict(ds), handle)
    os.replace(tmp_path, path)
    logger.info(f"Saved dataset ({ds.n} samples, D={ds.dim}) to {path}")
    return path


def load_dataset(path: str) -> Dataset:
    """
    Read a dataset file.

    Raises:
        DataError: parse-error (with line and column) for malformed JSON or
            missing fields, bad-version for an unknown format version
    """
    with open(path, "rb") as handle:
        raw = handle.read()
    try:
        payload = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise DataError(ErrorCode.PARSE_ERROR,
                        f"{path}: byte offset {exc.start}: not valid UTF-8") from exc
    except json.JSONDecodeError as exc:
        raise DataError(ErrorCode.PARSE_ERROR,
                        f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        ds = dataset_from_dict(payload)
    except (TypeError, ValueError) as exc:
        raise DataError(ErrorCode.PARSE_ERROR, f"{path}: {exc}") from exc
    logger.debug(f"Loaded dataset from {path}: {ds.n} samples")
    return ds
