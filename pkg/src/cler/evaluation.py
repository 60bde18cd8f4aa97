"""Accuracy matrices and the metrics computed from them.

``a[i, j]`` is the accuracy (percent) on task ``i``'s test set after training
task ``j``; only ``i <= j`` is defined, other cells hold NaN.
"""

from __future__ import annotations

import contextlib
import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from scipy import stats

MODES = ("class_il", "task_il")


@dataclass
class AccuracyMatrix:
    values: np.ndarray
    mode: str = "class_il"

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1] or self.values.shape[0] < 1:
            raise ValueError("accuracy matrix must be square with T >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown evaluation mode {self.mode!r}")
        defined = self.values[~np.isnan(self.values)]
        if np.any(defined < 0) or np.any(defined > 100):
            raise ValueError("accuracies must lie in [0, 100]")

    @classmethod
    def empty(cls, num_tasks: int, mode: str = "class_il") -> "AccuracyMatrix":
        return cls(np.full((num_tasks, num_tasks), np.nan), mode)

    @property
    def num_tasks(self) -> int:
        return self.values.shape[0]

    def final_accuracies(self) -> np.ndarray:
        return self.values[:, -1]

    def diagonal(self) -> np.ndarray:
        """Accuracy on each task right after training it."""
        return np.diag(self.values).copy()

    def to_nested(self) -> list:
        return [[None if math.isnan(v) else float(v) for v in row] for row in self.values]

    @classmethod
    def from_nested(cls, rows, mode: str = "class_il") -> "AccuracyMatrix":
        return cls(np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64), mode)

    def to_csv(self) -> str:
        """CSV with one row per after-task index and one column per task; blanks are undefined."""
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["after_task"] + [f"task_{i}" for i in range(self.num_tasks)])
        for j in range(self.num_tasks):
            col = self.values[:, j]
            writer.writerow([j] + ["" if math.isnan(v) else repr(float(v)) for v in col])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str, mode: str = "class_il") -> "AccuracyMatrix":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        t = len(rows)
        values = np.full((t, t), np.nan)
        for j, row in enumerate(rows):
            for i, cell in enumerate(row[1:]):
                if cell != "":
                    values[i, j] = float(cell)
        return cls(values, mode)


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, AccuracyMatrix) else np.asarray(m, dtype=np.float64)


def final_average_accuracy(m) -> float:
    """Mean accuracy over all tasks after the last task."""
    final = _values(m)[:, -1]
    if np.any(np.isnan(final)):
        raise ValueError("final row of the accuracy matrix is incomplete")
    return float(np.mean(final))


def final_average_adjusted_forgetting(m) -> float:
    """Mean relative drop, in percent, from each past task's peak to its final accuracy.

    The peak of task ``i`` is taken over evaluations after tasks ``i..T-2``
    (the last task is excluded). Drops are clamped at zero and a zero peak
    counts as no forgetting, so the result lies in [0, 100].
    """
    a = _values(m)
    t = a.shape[0]
    if t < 2:
        raise ValueError("forgetting needs at least two tasks")
    terms = np.zeros(t - 1)
    for i in range(t - 1):
        past = a[i, i:t - 1]
        if np.any(np.isnan(past)) or math.isnan(a[i, -1]):
            raise ValueError(f"accuracy history of task {i} is incomplete")
        peak = past.max()
        if peak > 0:
            terms[i] = max((peak - a[i, -1]) / peak, 0.0)
    return float(terms.mean() * 100.0)


def significance(a: Sequence[float], b: Sequence[float], equal_var: bool = True) -> float:
    """Two-sided two-sample t-test p-value (pooled variance unless ``equal_var=False``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two runs")
    if np.var(a) == 0 and np.var(b) == 0:
        return 1.0 if a.mean() == b.mean() else 0.0
    with warnings.catch_warnings():
        # constant samples trip scipy's precision heuristic; the statistic is still exact
        warnings.simplefilter("ignore", RuntimeWarning)
        p = stats.ttest_ind(a, b, equal_var=equal_var).pvalue
    return float(p)


@contextlib.contextmanager
def eval_mode(net: torch.nn.Module):
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            yield net
    finally:
        net.train(was_training)


def predict(net, images, allowed_classes: Optional[Iterable[int]] = None, batch_size: int = 500) -> np.ndarray:
    """Arg-max class predictions, optionally restricted to ``allowed_classes``."""
    images = torch.as_tensor(images)
    preds = []
    with eval_mode(net):
        mask = None
        for start in range(0, len(images), batch_size):
            logits = net(images[start:start + batch_size])
            if allowed_classes is not None:
                if mask is None:
                    mask = torch.zeros(logits.shape[1], dtype=torch.bool)
                    mask[list(allowed_classes)] = True
                logits = logits.masked_fill(~mask, float("-inf"))
            preds.append(logits.argmax(1))
    return torch.cat(preds).numpy() if preds else np.zeros(0, dtype=np.int64)


def accuracy(net, images, labels, allowed_classes=None) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("no examples to evaluate")
    return float(np.mean(predict(net, images, allowed_classes) == labels) * 100.0)


def class_il_accuracy(net, stream, task_index: int, seen_classes=None) -> float:
    """Single-head accuracy; ``seen_classes=None`` lets every logit compete."""
    x, y = stream.task_test(task_index)
    return accuracy(net, x, y, seen_classes)


def task_il_accuracy(net, stream, task_index: int) -> float:
    """Accuracy with the arg-max restricted to the task's own classes."""
    x, y = stream.task_test(task_index)
    return accuracy(net, x, y, stream.tasks[task_index].class_ids)


def pretext_accuracy(net, family, images, seed: int = 0, batch_size: int = 500) -> float:
    """Accuracy of the pretext head at recognising randomly applied transforms."""
    images = torch.as_tensor(images)
    gen = torch.Generator().manual_seed(seed)
    correct = 0
    with eval_mode(net):
        for start in range(0, len(images), batch_size):
            x, k = family.random_apply_batch(images[start:start + batch_size], gen)
            correct += int((net.forward_pretext(x).argmax(1) == k).sum())
    return 100.0 * correct / len(images)
