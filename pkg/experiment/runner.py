"""
Experiment runner.

Trains one model per (method, seed) on a shared stratified split, evaluates
it on the held-out split and collects per-epoch rows plus final macro
metrics into a MetricsReport. With an output directory, rows are appended to
the run files as each (method, seed) finishes.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from sklearn.metrics import accuracy_score
from sklearn.model_selection import train_test_split

from context_builder.context_builder import (ContextAssignment, context_proportions,
                                             contexts_from_labels, kmeans_assign, kmeans_fit,
                                             kmeans_labels)
from errors import ConfigError
from experiment.config import ExperimentConfig, MethodSpec
from gmm.mixture_model import gmm_fit_em
from model.mlp import Mlp, NormKind, build_mlp, loss_and_backprop, predict
from model.optimizer import OptState, adamw_step
from reporting.csv_writer import CONFIG_FILE, TIMING_FILE, RunDirectoryWriter, write_summary
from reporting.report_builder import (ContextRow, EpochRow, FinalRow, MetricsReport,
                                      compare_table, macro_metrics)
from synthetic_data.dataset_store import load_dataset
from synthetic_data.generators import Dataset, generate

logger = logging.getLogger(__name__)


@dataclass
class Split:
    train: np.ndarray
    eval: np.ndarray
    # positions within `eval` that the main metrics are computed on
    focus: np.ndarray


@dataclass
class RunJob:
    config: ExperimentConfig
    dataset: Dataset
    method: MethodSpec
    seed: int


@dataclass
class RunResult:
    method: str
    seed: int
    rows: List[EpochRow] = field(default_factory=list)
    final: Optional[FinalRow] = None
    context_rows: List[ContextRow] = field(default_factory=list)
    wall_s: float = 0.0


def resolve_dataset(config: ExperimentConfig) -> Dataset:
    spec = config.dataset
    if spec.path is not None:
        return load_dataset(spec.path)
    return generate(spec.generator, spec.params)


def split_dataset(config: ExperimentConfig, dataset: Dataset, seed: int) -> Split:
    """Stratified train/eval split seeded by the run seed; rows in ascending order."""
    rows = np.arange(dataset.n)
    fraction = config.evaluation.eval_fraction
    try:
        train, held_out = train_test_split(rows, test_size=fraction, random_state=seed,
                                           stratify=dataset.class_labels)
    except ValueError as exc:
        logger.warning(f"Stratified split impossible ({exc}); splitting without stratification")
        train, held_out = train_test_split(rows, test_size=fraction, random_state=seed)
    train, held_out = np.sort(train), np.sort(held_out)

    focus = np.arange(held_out.shape[0])
    focus_context = config.evaluation.focus_context
    if focus_context is not None:
        if dataset.context_labels is None:
            raise ConfigError("evaluation.focus_context", "dataset has no context labels")
        focus = np.flatnonzero(dataset.context_labels[held_out] == focus_context)
        if focus.size == 0:
            raise ConfigError("evaluation.focus_context",
                              f"context {focus_context} has no samples in the eval split")
    return Split(train=train, eval=held_out, focus=focus)


def label_mask(config: ExperimentConfig, dataset: Dataset, split: Split) -> np.ndarray:
    """
    Which training rows carry a label.

    Rows whose dataset context is listed in training.unlabeled_contexts are
    still normalized with the rest of their batch but never enter the loss.
    """
    unlabeled = config.training.unlabeled_contexts
    if not unlabeled:
        return np.ones(split.train.shape[0], dtype=bool)
    if dataset.context_labels is None:
        raise ConfigError("training.unlabeled_contexts", "dataset has no context labels")
    labeled = ~np.isin(dataset.context_labels[split.train], unlabeled)
    if not labeled.any():
        raise ConfigError("training.unlabeled_contexts", "no labelled training rows remain")
    return labeled


def _label_contexts(config: ExperimentConfig, dataset: Dataset) -> ContextAssignment:
    source = config.contexts.source
    if dataset.context_labels is None:
        raise ConfigError("contexts.source", f"{source!r} contexts need context labels in the dataset")
    mapping = contexts_from_labels(dataset.context_labels)
    if source == "ground_truth":
        if dataset.k_true is None:
            raise ConfigError("contexts.source", "dataset records no K_true")
        expected = config.contexts.k if config.contexts.k is not None else dataset.k_true
        if expected != dataset.k_true or mapping.k != dataset.k_true:
            raise ConfigError("contexts.k", f"ground-truth contexts need K = K_true = "
                                            f"{dataset.k_true}, got {expected} ({mapping.k} labelled)")
    elif config.contexts.k is not None and config.contexts.k != mapping.k:
        raise ConfigError("contexts.k", f"labels define {mapping.k} contexts, config asks for "
                                        f"{config.contexts.k}")
    return mapping


def _kmeans_contexts(config: ExperimentConfig, train_x: np.ndarray, eval_x: np.ndarray,
                     k: int) -> Tuple[ContextAssignment, ContextAssignment]:
    spec = config.contexts
    model = kmeans_fit(train_x, k, max_iter=spec.max_iter, tol=spec.tol, seed=spec.seed,
                       n_init=spec.n_init)
    train_assignment = kmeans_assign(model, train_x)
    eval_assignment = ContextAssignment(indices=kmeans_labels(model, eval_x), k=k,
                                        lam=train_assignment.lam)
    return train_assignment, eval_assignment


def build_contexts(config: ExperimentConfig, dataset: Dataset, split: Split,
                   k: Optional[int] = None) -> Tuple[ContextAssignment, ContextAssignment]:
    """
    Train and eval assignments for an SBN run.

    Labelled sources map the dataset's context labels, with lambda taken from
    the training rows. A method-level K that differs from the labelled
    count, or a kmeans source, clusters the flattened training inputs.
    """
    train_x = dataset.features[split.train]
    eval_x = dataset.features[split.eval]
    if config.contexts.source == "kmeans":
        return _kmeans_contexts(config, train_x, eval_x, k or config.contexts.k)

    mapping = _label_contexts(config, dataset)
    if k is not None and k != mapping.k:
        return _kmeans_contexts(config, train_x, eval_x, k)
    train_indices = mapping.indices[split.train]
    lam = context_proportions(train_indices, mapping.k)
    return (ContextAssignment(indices=train_indices, k=mapping.k, lam=lam),
            ContextAssignment(indices=mapping.indices[split.eval], k=mapping.k, lam=lam))


def _component_count(config: ExperimentConfig, dataset: Dataset, method: MethodSpec) -> int:
    for candidate in (method.k, config.contexts.k, dataset.k_true):
        if candidate is not None:
            return int(candidate)
    raise ConfigError("contexts.k", f"{method.name} needs a component count")


def build_model(config: ExperimentConfig, dataset: Dataset, split: Split, method: MethodSpec,
                seed: int, train_assignment: Optional[ContextAssignment]) -> Mlp:
    training = config.training
    kwargs = dict(seed=seed, eps=training.eps, momentum=training.momentum_alpha,
                  spatial=config.model.spatial)
    if method.kind is NormKind.SBN:
        kwargs.update(k=train_assignment.k, lam=train_assignment.lam)
    elif method.kind is NormKind.MN:
        k = _component_count(config, dataset, method)
        kwargs["gmm"] = gmm_fit_em(dataset.features[split.train], k,
                                   max_iter=config.contexts.max_iter, seed=config.contexts.seed)
    return build_mlp(dataset.dim, config.model.hidden, dataset.classes, method.kind, **kwargs)


def _batches(n_samples: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        rows = order[start:start + batch_size]
        # a trailing single sample has no batch statistics
        if rows.shape[0] >= 2:
            yield rows


def train_one(job: RunJob) -> RunResult:
    """Train and evaluate one (method, seed) pair."""
    config, dataset, method, seed = job.config, job.dataset, job.method, job.seed
    started = time.perf_counter()
    split = split_dataset(config, dataset, seed)
    train_x, train_y = dataset.features[split.train], dataset.class_labels[split.train]
    labeled = label_mask(config, dataset, split)
    eval_x, eval_y = dataset.features[split.eval], dataset.class_labels[split.eval]

    train_assignment = eval_assignment = None
    if method.kind is NormKind.SBN:
        train_assignment, eval_assignment = build_contexts(config, dataset, split, method.k)

    model = build_model(config, dataset, split, method, seed, train_assignment)
    params = model.parameters()
    opt = OptState.for_params(params, lr=config.training.lr,
                              weight_decay=config.training.weight_decay)
    contexts_known = config.evaluation.contexts_known
    rng = np.random.default_rng(seed)
    result = RunResult(method=method.name, seed=seed)

    for epoch in range(config.training.epochs):
        total_loss, seen = 0.0, 0
        for rows in _batches(train_x.shape[0], config.training.batch_size, rng):
            assignment = None if train_assignment is None else train_assignment.subset(rows)
            batch_mask = labeled[rows]
            loss, grads = loss_and_backprop(model, train_x[rows], train_y[rows], assignment,
                                            label_mask=batch_mask)
            count = int(batch_mask.sum())
            if count:
                adamw_step(opt, params, grads)
            total_loss += loss * count
            seen += count

        train_pred = predict(model, train_x, train_assignment)
        eval_pred = predict(model, eval_x, eval_assignment, contexts_known)
        row = EpochRow(method=method.name, seed=seed, epoch=epoch,
                       train_loss=total_loss / max(seen, 1),
                       train_acc=float(accuracy_score(train_y[labeled], train_pred[labeled])),
                       eval_acc=float(accuracy_score(eval_y[split.focus], eval_pred[split.focus])))
        result.rows.append(row)
        logger.debug(f"{method.name}/seed {seed} epoch {epoch}: loss {row.train_loss:.5f}, "
                     f"train acc {row.train_acc:.4f}, eval acc {row.eval_acc:.4f}")

    metrics = macro_metrics(eval_y[split.focus], eval_pred[split.focus])
    result.final = FinalRow(method=method.name, seed=seed, **metrics)
    if dataset.context_labels is not None:
        eval_contexts = dataset.context_labels[split.eval]
        for context in np.unique(eval_contexts):
            rows = eval_contexts == context
            result.context_rows.append(ContextRow(method=method.name, seed=seed,
                                                  context=int(context),
                                                  **macro_metrics(eval_y[rows], eval_pred[rows])))

    result.wall_s = time.perf_counter() - started
    logger.info(f"{method.name}/seed {seed}: eval acc {metrics['acc']:.4f}, "
                f"f1 {metrics['f1']:.4f} ({result.wall_s:.2f}s)")
    return result


def _run_jobs(jobs: List[RunJob], workers: int):
    if workers <= 1:
        for job in jobs:
            yield train_one(job)
        return
    with ProcessPoolExecutor(max_workers=workers) as executor:
        # map yields results in submission order
        yield from executor.map(train_one, jobs)


def run_experiment(config: ExperimentConfig, out_dir: Optional[str] = None,
                   dataset: Optional[Dataset] = None) -> MetricsReport:
    """
    Run every (method, seed) pair of `config`.

    Args:
        config: validated experiment configuration
        out_dir: run directory; when given, rows.csv, finals.csv,
            context_metrics.csv, summary.csv, timing.json and config.json
            are written there
        dataset: overrides the dataset named in the config

    Returns:
        the MetricsReport
    """
    config.validate()
    if dataset is None:
        dataset = resolve_dataset(config)
    methods = config.method_specs()
    report = MetricsReport(include_timing=config.report.include_timing)
    writer = RunDirectoryWriter(out_dir) if out_dir else None
    if writer:
        writer.write_json(CONFIG_FILE, config.to_dict())

    jobs = [RunJob(config=config, dataset=dataset, method=method, seed=seed)
            for method in methods for seed in config.training.seeds]
    logger.info(f"Running {config.name!r}: {len(methods)} methods x "
                f"{len(config.training.seeds)} seeds on {dataset.n} samples "
                f"(workers={config.workers})")

    wall_s: Dict[str, float] = {method.name: 0.0 for method in methods}
    for result in _run_jobs(jobs, config.workers):
        report.rows.extend(result.rows)
        report.finals.append(result.final)
        report.context_rows.extend(result.context_rows)
        wall_s[result.method] += result.wall_s
        if writer:
            writer.append_rows(result.rows)
            writer.append_final(result.final)
            writer.append_context_rows(result.context_rows)
    report.wall_s = wall_s

    if writer:
        writer.write_json(TIMING_FILE, {"include_timing": config.report.include_timing,
                                        "wall_s": wall_s})
        _, summary_csv = compare_table(report)
        write_summary(out_dir, summary_csv)
    return report
