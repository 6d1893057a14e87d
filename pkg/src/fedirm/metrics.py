"""Multi-class evaluation: one-vs-rest AUC and confusion-matrix metrics (macro averaged)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidInputError, UndefinedMetricError
from .numerics import Network, forward

log = logging.getLogger(__name__)

METRIC_NAMES = ("auc", "sensitivity", "specificity", "accuracy", "f1")


def ovr_auc_per_class(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Mann-Whitney AUC of each score column vs. the rest; NaN where undefined."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n, n_classes = scores.shape
    if labels.shape != (n,):
        raise InvalidInputError("one label per score row required")
    out = np.full(n_classes, np.nan)
    for c in range(n_classes):
        pos = labels == c
        n_pos = int(pos.sum())
        n_neg = n - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = rankdata(scores[:, c])  # average ranks: ties count half
        out[c] = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return out


def auc_ovr(scores: np.ndarray, labels: np.ndarray) -> float:
    if np.asarray(scores).shape[0] < 2:
        raise InvalidInputError("AUC needs at least two samples")
    per_class = ovr_auc_per_class(scores, labels)
    defined = ~np.isnan(per_class)
    if not defined.any():
        raise UndefinedMetricError("no class has both positive and negative samples")
    if not defined.all():
        log.info("AUC skipped classes %s (no positives or no negatives)", np.flatnonzero(~defined).tolist())
    return float(per_class[defined].mean())


def _ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    defined = den > 0
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=defined), defined


@dataclass
class ConfusionMetrics:
    confusion: np.ndarray
    accuracy: float
    sensitivity: float
    specificity: float
    f1: float
    per_class_sensitivity: np.ndarray
    per_class_specificity: np.ndarray
    per_class_f1: np.ndarray
    undefined: dict[str, np.ndarray] = field(default_factory=dict)  # metric -> bool[C], 0/0 cells


def confusion_metrics(predictions: np.ndarray, labels: np.ndarray, n_classes: int) -> ConfusionMetrics:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise InvalidInputError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    for arr in (predictions, labels):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise InvalidInputError(f"class indices must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)  # rows: truth, cols: prediction
    np.add.at(cm, (labels, predictions), 1)
    tp = np.diag(cm).astype(np.float64)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = cm.sum() - tp - fn - fp
    sens, sens_ok = _ratio(tp, tp + fn)
    spec, spec_ok = _ratio(tn, tn + fp)
    f1, f1_ok = _ratio(2 * tp, 2 * tp + fp + fn)

    def macro(values, ok):
        return float(values[ok].mean()) if ok.any() else 0.0

    return ConfusionMetrics(
        confusion=cm,
        accuracy=float(tp.sum() / max(labels.size, 1)),
        sensitivity=macro(sens, sens_ok),
        specificity=macro(spec, spec_ok),
        f1=macro(f1, f1_ok),
        per_class_sensitivity=sens,
        per_class_specificity=spec,
        per_class_f1=f1,
        undefined={"sensitivity": ~sens_ok, "specificity": ~spec_ok, "f1": ~f1_ok},
    )


@dataclass
class EvalResult:
    auc: float
    sensitivity: float
    specificity: float
    accuracy: float
    f1: float
    per_class_auc: np.ndarray
    confusion: ConfusionMetrics
    n_samples: int

    def row(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def report(self) -> str:
        lines = [f"samples: {self.n_samples}"]
        lines += [f"{name}: {getattr(self, name):.4f}" for name in METRIC_NAMES]
        lines.append("per-class auc: " + " ".join(f"{v:.4f}" for v in self.per_class_auc))
        lines.append("per-class sensitivity: " + " ".join(f"{v:.4f}" for v in self.confusion.per_class_sensitivity))
        return "\n".join(lines)


def evaluate_scores(probs: np.ndarray, labels: np.ndarray) -> EvalResult:
    n_classes = probs.shape[1]
    cm = confusion_metrics(np.argmax(probs, axis=1), labels, n_classes)
    per_class = ovr_auc_per_class(probs, labels)
    auc = float(np.nanmean(per_class)) if not np.all(np.isnan(per_class)) else float("nan")
    return EvalResult(auc, cm.sensitivity, cm.specificity, cm.accuracy, cm.f1, per_class, cm, labels.size)


def evaluate(net: Network, features: np.ndarray, labels: np.ndarray) -> EvalResult:
    return evaluate_scores(forward(net, features).probs, labels)
