"""Per-task classification metrics and the class-count-weighted multi-task score.

Per task we report accuracy, macro-F1 and weighted-F1 from a confusion
matrix. Across tasks, the multi-task model strength (MTMS) is the mean of
per-task accuracies weighted by each task's class count, so tasks with more
classes count for more.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import TaskSpec

from .exceptions import CrisisFusionError

__all__ = [
    "TaskResult",
    "MetricsReport",
    "compute_task_metrics",
    "compute_mtms",
    "format_table",
]


class MetricsError(CrisisFusionError, ValueError):
    pass


@dataclass(frozen=True)
class TaskResult:
    """Scores for a single task. Confusion rows are true classes, columns predicted."""

    task_id: str
    class_count: int
    accuracy: float
    macro_f1: float
    weighted_f1: float
    confusion: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "class_count": self.class_count,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "confusion": self.confusion.tolist(),
        }


@dataclass(frozen=True)
class MetricsReport:
    """Per-task results plus the cross-task MTMS score and its weights."""

    results: tuple[TaskResult, ...]
    weights: tuple[float, ...]
    mtms: float

    def to_dict(self) -> dict:
        return {
            "tasks": [r.to_dict() for r in self.results],
            "weights": list(self.weights),
            "mtms": self.mtms,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def confusion_matrix(predictions, labels, class_count: int) -> np.ndarray:
    """Count matrix with rows indexed by true label and columns by prediction."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise MetricsError(
            f"predictions and labels must be equal-length 1-d sequences, "
            f"got {predictions.shape} vs {labels.shape}"
        )
    for name, arr in (("prediction", predictions), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= class_count):
            raise MetricsError(f"{name} index out of range [0, {class_count})")
    conf = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(conf, (labels, predictions), 1)
    return conf


def _f1_from_confusion(conf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class F1 and supports; zero predicted or zero support gives F1 = 0."""
    tp = np.diag(conf).astype(np.float64)
    support = conf.sum(axis=1).astype(np.float64)
    predicted = conf.sum(axis=0).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    return f1, support


def compute_task_metrics(predictions, labels, task: TaskSpec) -> TaskResult:
    """Accuracy, macro-F1 and weighted-F1 for one task from prediction/label indices."""
    conf = confusion_matrix(predictions, labels, task.class_count)
    total = conf.sum()
    if total == 0:
        raise MetricsError(f"no samples to score for {task.task_id}")
    accuracy = float(np.trace(conf) / total)
    f1, support = _f1_from_confusion(conf)
    macro_f1 = float(f1.mean())
    weighted_f1 = float((f1 * support).sum() / support.sum())
    return TaskResult(
        task_id=task.task_id,
        class_count=task.class_count,
        accuracy=accuracy,
        macro_f1=macro_f1,
        weighted_f1=weighted_f1,
        confusion=conf,
    )


def compute_mtms(results: list[TaskResult] | tuple[TaskResult, ...]) -> MetricsReport:
    """Combine per-task results into a report with the class-count-weighted score.

    The weight of task i is c_i / sum_j c_j where c is the class count, so the
    weights sum to 1 and MTMS stays within [min accuracy, max accuracy].
    """
    results = tuple(results)
    if not results:
        raise MetricsError("cannot compute MTMS of an empty result list")
    task_ids = [r.task_id for r in results]
    if len(set(task_ids)) != len(task_ids):
        raise MetricsError(f"duplicate task ids in {task_ids}")
    total_classes = sum(r.class_count for r in results)
    weights = tuple(r.class_count / total_classes for r in results)
    mtms = float(sum(w * r.accuracy for w, r in zip(weights, results)))
    return MetricsReport(results=results, weights=weights, mtms=mtms)


def format_table(report: MetricsReport) -> str:
    """Text table with per-task Acc / M-F1 / W-F1 columns plus the MTMS column.

    Scores are percentages rounded to one decimal; full precision stays in the
    report object.
    """
    header = ["Task", "Acc", "M-F1", "W-F1"]
    lines = ["  ".join(f"{h:>8}" for h in header)]
    for r in report.results:
        row = [
            r.task_id,
            f"{100 * r.accuracy:.1f}",
            f"{100 * r.macro_f1:.1f}",
            f"{100 * r.weighted_f1:.1f}",
        ]
        lines.append("  ".join(f"{c:>8}" for c in row))
    lines.append("  ".join(f"{c:>8}" for c in ["MTMS", f"{100 * report.mtms:.1f}", "", ""]))
    return "\n".join(lines)
