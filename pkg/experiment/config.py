"""
Experiment configuration.

A JSON document whose keys mirror the dataclasses below. Validation raises
ConfigError naming the offending field.
"""

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

from context_builder.context_builder import DEFAULT_N_INIT
from errors import ConfigError
from model.mlp import NormKind

logger = logging.getLogger(__name__)

CONTEXT_SOURCES = ("labels", "kmeans", "ground_truth")
BASE_METHODS = ("bn", "ln", "in", "mn", "sbn")
METHOD_PATTERN = re.compile(r"^(bn|ln|in|mn|sbn)(?:-(\d+))?$")


@dataclass(frozen=True)
class MethodSpec:
    """A normalization method, optionally with its own number of contexts (sbn-8, mn-4)."""
    name: str
    kind: NormKind
    k: Optional[int] = None

    @classmethod
    def parse(cls, name: str) -> "MethodSpec":
        match = METHOD_PATTERN.match(str(name))
        if match is None:
            raise ConfigError("methods", f"unknown method {name!r}; expected one of "
                                         f"{list(BASE_METHODS)} or sbn-<K> / mn-<K>")
        base, k = match.group(1), match.group(2)
        if k is not None:
            if base not in ("sbn", "mn"):
                raise ConfigError("methods", f"{name!r}: only sbn and mn take a context count")
            if int(k) < 1:
                raise ConfigError("methods", f"{name!r}: context count must be >= 1")
        return cls(name=name, kind=NormKind(base), k=None if k is None else int(k))


@dataclass
class DatasetSpec:
    generator: Optional[str] = None
    params: Dict[str, Any] = field(default_factory=dict)
    path: Optional[str] = None


@dataclass
class ContextSpec:
    source: str = "labels"
    k: Optional[int] = None
    seed: int = 0
    max_iter: int = 100
    tol: float = 1e-4
    n_init: int = DEFAULT_N_INIT


@dataclass
class ModelSpec:
    hidden: List[int] = field(default_factory=lambda: [64, 64])
    spatial: int = 1


@dataclass
class TrainingSpec:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    momentum_alpha: float = 0.9
    eps: float = 1e-5
    seeds: List[int] = field(default_factory=lambda: [0])
    # dataset contexts whose training rows are normalized but carry no label
    unlabeled_contexts: List[int] = field(default_factory=list)


@dataclass
class EvaluationSpec:
    contexts_known: bool = True
    focus_context: Optional[int] = None
    eval_fraction: float = 0.2


@dataclass
class ReportSpec:
    include_timing: bool = False


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    contexts: ContextSpec = field(default_factory=ContextSpec)
    methods: List[str] = field(default_factory=lambda: ["bn", "sbn"])
    model: ModelSpec = field(default_factory=ModelSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    evaluation: EvaluationSpec = field(default_factory=EvaluationSpec)
    report: ReportSpec = field(default_factory=ReportSpec)
    workers: int = 1

    def method_specs(self) -> List[MethodSpec]:
        return [MethodSpec.parse(name) for name in self.methods]

    def validate(self) -> "ExperimentConfig":
        """Check every invariant; raise ConfigError naming the first bad field."""
        if self.dataset.path is None and self.dataset.generator is None:
            raise ConfigError("dataset", "needs either a generator or a path")
        if self.dataset.path is not None and self.dataset.generator is not None:
            raise ConfigError("dataset", "give a generator or a path, not both")

        if self.contexts.source not in CONTEXT_SOURCES:
            raise ConfigError("contexts.source",
                              f"{self.contexts.source!r} is not one of {list(CONTEXT_SOURCES)}")
        if self.contexts.source == "kmeans" and self.contexts.k is None:
            raise ConfigError("contexts.k", "kmeans contexts need k")
        if self.contexts.k is not None and self.contexts.k < 1:
            raise ConfigError("contexts.k", f"must be >= 1, got {self.contexts.k}")
        if self.contexts.max_iter < 1:
            raise ConfigError("contexts.max_iter", f"must be >= 1, got {self.contexts.max_iter}")
        if self.contexts.tol < 0:
            raise ConfigError("contexts.tol", f"must be >= 0, got {self.contexts.tol}")
        if self.contexts.n_init < 1:
            raise ConfigError("contexts.n_init", f"must be >= 1, got {self.contexts.n_init}")

        if not self.methods:
            raise ConfigError("methods", "at least one method is required")
        specs = self.method_specs()
        if len({spec.name for spec in specs}) != len(specs):
            raise ConfigError("methods", "method names must be unique")

        if not self.model.hidden or any(width < 1 for width in self.model.hidden):
            raise ConfigError("model.hidden", "needs at least one width, each >= 1")
        if self.model.spatial < 1:
            raise ConfigError("model.spatial", f"must be >= 1, got {self.model.spatial}")
        if any(width % self.model.spatial for width in self.model.hidden):
            raise ConfigError("model.hidden",
                              f"widths must be multiples of spatial={self.model.spatial}")
        if self.model.spatial < 2 and any(spec.kind is NormKind.IN for spec in specs):
            # one activation per plane: instance normalization outputs beta for every input
            raise ConfigError("model.spatial", "instance normalization needs spatial >= 2, "
                                               f"got {self.model.spatial}")

        training = self.training
        if training.epochs < 1:
            raise ConfigError("training.epochs", f"must be >= 1, got {training.epochs}")
        if training.batch_size < 2:
            raise ConfigError("training.batch_size", f"must be >= 2, got {training.batch_size}")
        if not training.lr > 0:
            raise ConfigError("training.lr", f"must be > 0, got {training.lr}")
        if training.weight_decay < 0:
            raise ConfigError("training.weight_decay", f"must be >= 0, got {training.weight_decay}")
        if not 0.0 <= training.momentum_alpha < 1.0:
            raise ConfigError("training.momentum_alpha",
                              f"must lie in [0, 1), got {training.momentum_alpha}")
        if not training.eps > 0:
            raise ConfigError("training.eps", f"must be > 0, got {training.eps}")
        if not training.seeds:
            raise ConfigError("training.seeds", "at least one seed is required")
        if len(set(training.seeds)) != len(training.seeds):
            raise ConfigError("training.seeds", "seeds must be unique")
        if len(set(training.unlabeled_contexts)) != len(training.unlabeled_contexts):
            raise ConfigError("training.unlabeled_contexts", "contexts must be unique")

        if not 0.0 < self.evaluation.eval_fraction < 1.0:
            raise ConfigError("evaluation.eval_fraction",
                              f"must lie in (0, 1), got {self.evaluation.eval_fraction}")
        if self.workers < 1:
            raise ConfigError("workers", f"must be >= 1, got {self.workers}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


SECTIONS = {
    "dataset": DatasetSpec,
    "contexts": ContextSpec,
    "model": ModelSpec,
    "training": TrainingSpec,
    "evaluation": EvaluationSpec,
    "report": ReportSpec,
}


def _build_section(name: str, cls, payload: Any):
    if payload is None:
        return cls()
    if not isinstance(payload, dict):
        raise ConfigError(name, "must be a JSON object")
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}", "unknown field")
    return cls(**payload)


def config_from_dict(payload: Dict[str, Any]) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from parsed JSON."""
    if not isinstance(payload, dict):
        raise ConfigError("config", "must be a JSON object")
    unknown = sorted(set(payload) - set(ExperimentConfig.__dataclass_fields__))
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    kwargs = {name: _build_section(name, cls, payload.get(name)) for name, cls in SECTIONS.items()}
    for name in ("name", "methods", "workers"):
        if name in payload:
            kwargs[name] = payload[name]
    try:
        config = ExperimentConfig(**kwargs)
        return config.validate()
    except TypeError as exc:
        raise ConfigError("config", f"field has the wrong type: {exc}") from exc


def load_config(path: str) -> ExperimentConfig:
    """Read and validate a config file."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    config = config_from_dict(payload)
    logger.info(f"Loaded config {config.name!r} from {path}")
    return config
