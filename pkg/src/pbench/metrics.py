"""Accuracy, confusion matrix, per-class scores, attack success rate and seed CIs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .model import predict_many


class MetricsError(ValueError):
    pass


class UndefinedMetric(MetricsError):
    """Raised when a rate has an empty denominator (e.g. no source-class samples)."""


@dataclass(frozen=True)
class ClassScores:
    precision: float | None
    recall: float | None  # None when the class is absent from the truths
    f1: float | None
    support: int


@dataclass
class MetricsReport:
    class_order: tuple[str, ...]
    overall_accuracy: float
    confusion: np.ndarray  # rows = truth, cols = prediction
    per_class: dict[str, ClassScores]
    beta_test: float | None = None
    asr_clean: float | None = None
    asr_triggered: float | None = None
    delta_acc: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def recall(self, cls: str) -> float | None:
        s = self.per_class.get(cls)
        return None if s is None else s.recall


def confusion_matrix(truths: Sequence[str], preds: Sequence[str], class_order: Sequence[str]) -> np.ndarray:
    if len(truths) != len(preds):
        raise MetricsError(f"{len(truths)} truths but {len(preds)} predictions")
    index = {c: i for i, c in enumerate(class_order)}
    cm = np.zeros((len(class_order), len(class_order)), dtype=np.int64)
    for t, p in zip(truths, preds):
        if t not in index or p not in index:
            raise MetricsError(f"unknown label {t if t not in index else p!r}")
        cm[index[t], index[p]] += 1
    return cm


def report_from_predictions(truths: Sequence[str], preds: Sequence[str], class_order: Sequence[str],
                            target: str | None = None, baseline_accuracy: float | None = None) -> MetricsReport:
    if not truths:
        raise MetricsError("empty test set")
    order = tuple(class_order)
    cm = confusion_matrix(truths, preds, order)
    total = int(cm.sum())
    per_class = {}
    for i, c in enumerate(order):
        tp = int(cm[i, i])
        support = int(cm[i].sum())
        predicted = int(cm[:, i].sum())
        recall = tp / support if support else None
        precision = tp / predicted if predicted else (0.0 if support else None)
        if recall is None or precision is None:
            f1 = None
        else:
            f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        per_class[c] = ClassScores(precision, recall, f1, support)
    acc = int(np.trace(cm)) / total
    beta = None
    if target is not None:
        beta = int(cm[order.index(target)].sum()) / total
    delta = None if baseline_accuracy is None else baseline_accuracy - acc
    return MetricsReport(order, acc, cm, per_class, beta_test=beta, delta_acc=delta)


def evaluate(params, grids, truths: Sequence[str], target: str | None = None,
             baseline_accuracy: float | None = None) -> MetricsReport:
    if len(truths) == 0:
        raise MetricsError("empty test set")
    unknown = sorted(set(truths) - set(params.class_order))
    if unknown:
        raise MetricsError(f"unknown label(s) {unknown}")
    preds = predict_many(params, grids)
    return report_from_predictions(truths, preds, params.class_order, target, baseline_accuracy)


def attack_success_rate(preds: Sequence[str], truths: Sequence[str], source: str, target: str) -> float:
    if len(preds) != len(truths):
        raise MetricsError(f"{len(truths)} truths but {len(preds)} predictions")
    n_source = sum(1 for t in truths if t == source)
    if n_source == 0:
        raise UndefinedMetric(f"ASR undefined: no samples of source class {source}")
    hits = sum(1 for t, p in zip(truths, preds) if t == source and p == target)
    return hits / n_source


@dataclass(frozen=True)
class BetaBound:
    delta_acc: float
    bound: float
    holds: bool
    premise: bool  # predictions agree on every sample outside the class


def beta_bound_check(preds_a: Sequence[str], preds_b: Sequence[str], truths: Sequence[str],
                     cls: str) -> BetaBound:
    """|acc_a - acc_b| <= count(cls) / total, compared exactly in integers."""
    if not (len(preds_a) == len(preds_b) == len(truths)):
        raise MetricsError("prediction and truth lists differ in length")
    if not truths:
        raise MetricsError("empty test set")
    n = len(truths)
    correct_a = sum(1 for p, t in zip(preds_a, truths) if p == t)
    correct_b = sum(1 for p, t in zip(preds_b, truths) if p == t)
    n_cls = sum(1 for t in truths if t == cls)
    premise = all(a == b for a, b, t in zip(preds_a, preds_b, truths) if t != cls)
    # both sides share the denominator n, so compare numerators
    holds = abs(correct_a - correct_b) <= n_cls
    return BetaBound(abs(correct_a - correct_b) / n, n_cls / n, holds, premise)


@dataclass(frozen=True)
class SeedCI:
    mean: float  # percent
    lo: float
    hi: float
    n: int


def ci_across_seeds(values: Sequence[float], level: float = 0.95) -> SeedCI:
    """Student-t interval over per-seed fractions, in percent, clipped to [0, 100]."""
    n = len(values)
    if n < 2:
        raise MetricsError("a seed CI needs at least two values")
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    sd = float(arr.std(ddof=1))
    half = float(stats.t.ppf(0.5 + level / 2, n - 1)) * sd / math.sqrt(n)
    return SeedCI(100 * mean, max(0.0, 100 * (mean - half)), min(100.0, 100 * (mean + half)), n)


# -- rendering ---------------------------------------------------------------

def _fmt(x: float | None, digits: int = 4) -> str:
    return "NA" if x is None else f"{x:.{digits}f}"


def report_tsv(report: MetricsReport) -> str:
    lines = [
        f"overall_accuracy\t{_fmt(report.overall_accuracy)}",
        f"beta_test\t{_fmt(report.beta_test)}",
        f"delta_acc\t{_fmt(report.delta_acc)}",
        f"asr_clean\t{_fmt(report.asr_clean)}",
        f"asr_triggered\t{_fmt(report.asr_triggered)}",
        "class\tprecision\trecall\tf1\tsupport",
    ]
    for c in report.class_order:
        s = report.per_class[c]
        lines.append(f"{c}\t{_fmt(s.precision)}\t{_fmt(s.recall)}\t{_fmt(s.f1)}\t{s.support}")
    lines.append("confusion\t" + "\t".join(report.class_order))
    for c, row in zip(report.class_order, report.confusion):
        lines.append(c + "\t" + "\t".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def report_human(report: MetricsReport) -> str:
    out = [f"accuracy {100 * report.overall_accuracy:.1f}%  (n={report.total})"]
    if report.asr_clean is not None:
        out.append(f"clean ASR {100 * report.asr_clean:.1f}%")
    if report.asr_triggered is not None:
        out.append(f"triggered ASR {100 * report.asr_triggered:.1f}%")
    width = max(len(c) for c in report.class_order)
    out.append(f"{'class':<{width}}  precision  recall     f1  support")
    for c in report.class_order:
        s = report.per_class[c]
        out.append(f"{c:<{width}}  {_fmt(s.precision, 3):>9}  {_fmt(s.recall, 3):>6}  {_fmt(s.f1, 3):>5}  {s.support:>7}")
    return "\n".join(out) + "\n"
