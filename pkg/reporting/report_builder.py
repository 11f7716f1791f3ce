"""
Metrics reports and comparison tables.

A MetricsReport holds one row per (method, seed, epoch), the final eval
metrics per (method, seed), per-context breakdowns and wall-clock seconds per
method. compare_table reduces it to one line per method.
"""

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, precision_recall_fscore_support

from errors import ErrorCode, NormError

logger = logging.getLogger(__name__)

ROW_FIELDS = ("method", "seed", "epoch", "train_loss", "train_acc", "eval_acc")
FINAL_FIELDS = ("method", "seed", "acc", "prec", "rec", "f1")
CONTEXT_FIELDS = ("method", "seed", "context", "acc", "prec", "rec", "f1")
SUMMARY_FIELDS = ("method", "acc_mean", "acc_std", "prec", "rec", "f1", "wall_s")


@dataclass
class EpochRow:
    method: str
    seed: int
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float


@dataclass
class FinalRow:
    method: str
    seed: int
    acc: float
    prec: float
    rec: float
    f1: float


@dataclass
class ContextRow:
    method: str
    seed: int
    context: int
    acc: float
    prec: float
    rec: float
    f1: float


@dataclass
class SummaryRow:
    """Mean and population standard deviation across seeds."""
    method: str
    seeds: int
    acc_mean: float
    acc_std: float
    prec_mean: float
    prec_std: float
    rec_mean: float
    rec_std: float
    f1_mean: float
    f1_std: float
    wall_s: float


@dataclass
class MetricsReport:
    rows: List[EpochRow] = field(default_factory=list)
    finals: List[FinalRow] = field(default_factory=list)
    context_rows: List[ContextRow] = field(default_factory=list)
    wall_s: Dict[str, float] = field(default_factory=dict)
    include_timing: bool = False

    @property
    def methods(self) -> List[str]:
        """Methods in first-appearance order."""
        seen = {}
        for row in [*self.finals, *self.rows]:
            seen.setdefault(row.method, None)
        return list(seen)

    def is_empty(self) -> bool:
        return not self.finals

    def rows_for(self, method: str, seed: int) -> List[EpochRow]:
        return [row for row in self.rows if row.method == method and row.seed == seed]

    def summary(self) -> List[SummaryRow]:
        summaries = []
        for method in self.methods:
            finals = [row for row in self.finals if row.method == method]
            if not finals:
                continue
            stats = {}
            for metric in ("acc", "prec", "rec", "f1"):
                values = np.array([getattr(row, metric) for row in finals])
                stats[f"{metric}_mean"] = float(values.mean())
                stats[f"{metric}_std"] = float(values.std())
            summaries.append(SummaryRow(method=method, seeds=len(finals),
                                        wall_s=self.wall_s.get(method, 0.0), **stats))
        return summaries


def macro_metrics(y_true, y_pred) -> Dict[str, float]:
    """Accuracy plus macro-averaged precision, recall and f1 over the classes present."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise NormError(ErrorCode.EMPTY_SELECTION, "no samples to score")
    precision, recall, f1, _ = precision_recall_fscore_support(
        y_true, y_pred, average="macro", zero_division=0)
    return {
        "acc": float(accuracy_score(y_true, y_pred)),
        "prec": float(precision),
        "rec": float(recall),
        "f1": float(f1),
    }


def _percent(mean: float, std: float) -> str:
    return f"{100 * mean:6.2f} ± {100 * std:5.2f}"


def compare_table(report: MetricsReport) -> Tuple[str, str]:
    """
    One line per method: accuracy, precision, recall and f1 as mean ± std
    across seeds.

    Returns:
        (text table in percent, summary CSV)
    """
    if report.is_empty():
        raise NormError(ErrorCode.EMPTY_REPORT, "report has no final metrics")
    summaries = report.summary()

    width = max(len("Method"), *(len(row.method) for row in summaries))
    header = (f"{'Method':<{width}}  {'Accuracy':>15}  {'Precision':>15}  "
              f"{'Recall':>15}  {'F1':>15}  {'Seeds':>5}")
    lines = [header, "-" * len(header)]
    for row in summaries:
        lines.append(f"{row.method:<{width}}  {_percent(row.acc_mean, row.acc_std):>15}  "
                     f"{_percent(row.prec_mean, row.prec_std):>15}  "
                     f"{_percent(row.rec_mean, row.rec_std):>15}  "
                     f"{_percent(row.f1_mean, row.f1_std):>15}  {row.seeds:>5}")

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SUMMARY_FIELDS)
    for row in summaries:
        wall_s = row.wall_s if report.include_timing else 0.0
        writer.writerow([row.method, f"{row.acc_mean:.6f}", f"{row.acc_std:.6f}",
                         f"{row.prec_mean:.6f}", f"{row.rec_mean:.6f}", f"{row.f1_mean:.6f}",
                         f"{wall_s:.3f}"])
    return "\n".join(lines) + "\n", buffer.getvalue()


def check_consistency(report: MetricsReport) -> List[str]:
    """
    Cross-check finals against the per-epoch rows: each final accuracy must
    equal the eval accuracy of that run's last epoch.

    Returns:
        a description of every mismatch (empty when consistent)
    """
    problems = []
    for final in report.finals:
        rows = report.rows_for(final.method, final.seed)
        if not rows:
            problems.append(f"{final.method}/seed {final.seed}: no epoch rows")
            continue
        last = max(rows, key=lambda row: row.epoch)
        if last.eval_acc != final.acc:
            problems.append(f"{final.method}/seed {final.seed}: final acc {final.acc!r} "
                            f"!= last epoch eval_acc {last.eval_acc!r}")
    return problems
