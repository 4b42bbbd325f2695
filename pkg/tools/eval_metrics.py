"""Classifier and segmentation metrics: F1, ROC-AUC, PR-AUC and IoU."""

import dataclasses
import logging

import numpy as np
import scipy.stats
import sklearn.metrics

from helpers import ValidationError

logger = logging.getLogger(__name__)


class NoRelevantItems(ValidationError):
    pass


class NoPositives(ValidationError):
    pass


class SingleClass(ValidationError):
    """Only one class is present where both are needed."""


class ShapeMismatch(ValidationError):
    pass


@dataclasses.dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValidationError(f"confusion counts must be non-negative: {self}")

    @classmethod
    def from_predictions(cls, labels, predicted):
        labels = np.asarray(labels, dtype=bool)
        predicted = np.asarray(predicted, dtype=bool)
        if labels.shape != predicted.shape:
            raise ShapeMismatch(f"{labels.shape} labels vs {predicted.shape} predictions")
        return cls(
            tp=int(np.sum(labels & predicted)),
            fp=int(np.sum(~labels & predicted)),
            fn=int(np.sum(labels & ~predicted)),
            tn=int(np.sum(~labels & ~predicted)),
        )


@dataclasses.dataclass(frozen=True)
class ScoredLabels:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float).ravel()
        labels = np.asarray(self.labels).ravel()
        if scores.shape != labels.shape:
            raise ShapeMismatch(f"{scores.size} scores vs {labels.size} labels")
        if not np.isin(labels, (0, 1)).all():
            raise ValidationError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(int))

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return int(self.labels.size - self.labels.sum())


def precision(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0


def recall(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


def f1_score(c: ConfusionCounts) -> float:
    """Harmonic mean of precision and recall; 0 when there are no true positives."""
    if c.tp + c.fp + c.fn == 0:
        raise NoRelevantItems("F1 is undefined without any positive label or prediction")
    if c.tp == 0:
        return 0.0
    p, r = precision(c), recall(c)
    return 2 * p * r / (p + r)


def roc_auc(s: ScoredLabels) -> float:
    """Probability that a random positive outscores a random negative, ties counting half."""
    n_pos, n_neg = s.n_positive, s.n_negative
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC-AUC needs both positive and negative labels")
    ranks = scipy.stats.rankdata(s.scores)
    u = ranks[s.labels == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def pr_auc(s: ScoredLabels) -> float:
    """Average precision over the descending-score ranking, tied scores grouped."""
    if s.n_positive == 0:
        raise NoPositives("PR-AUC needs at least one positive label")
    return float(sklearn.metrics.average_precision_score(s.labels, s.scores))


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"masks of shape {a.shape} and {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def iou_per_structure(predicted, truth) -> dict:
    """IoU of the capsule (labels 1 and 2) and tuft (label 2) regions of two label masks."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    return {
        "bow": iou(predicted >= 1, truth >= 1),
        "tuft": iou(predicted == 2, truth == 2),
    }


def roc_auc_ovr(scores, labels, classes=None) -> float:
    """Macro-averaged one-vs-rest ROC-AUC for an (n, C) score matrix."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    classes = list(classes) if classes is not None else sorted(np.unique(labels).tolist())
    if scores.ndim != 2 or scores.shape != (labels.size, len(classes)):
        raise ShapeMismatch(f"score matrix {scores.shape} for {labels.size} labels and {len(classes)} classes")
    aucs = [roc_auc(ScoredLabels(scores[:, i], (labels == c).astype(int))) for i, c in enumerate(classes)]
    return float(np.mean(aucs))


def summarize_runs(values) -> tuple:
    """Mean and sample standard deviation of one metric across runs."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValidationError("no runs to summarize")
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), std


def threshold_counts(s: ScoredLabels, threshold: float = 0.5) -> ConfusionCounts:
    """Confusion counts of the prediction score >= threshold."""
    return ConfusionCounts.from_predictions(s.labels == 1, s.scores >= threshold)
