"""Balanced accuracy and ROC AUC for binary malware scores."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .exceptions import InputError


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InputError(f"scores {scores.shape} and labels {labels.shape} must be equal-length 1D")
    if not np.isin(labels, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    if not (labels == 1).any() or not (labels == 0).any():
        raise InputError("both classes must be present")
    return scores, labels.astype(bool)


def balanced_accuracy(scores, labels, threshold=0.5):
    """Mean of true-positive and true-negative rates; positive iff score >= threshold."""
    scores, positive = _check(scores, labels)
    predicted = scores >= threshold
    tpr = predicted[positive].mean()
    tnr = (~predicted[~positive]).mean()
    return float(0.5 * (tpr + tnr))


def auc(scores, labels):
    """Mann-Whitney estimate of P(score_malicious > score_benign), ties count 1/2."""
    scores, positive = _check(scores, labels)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    balanced_accuracy: float
    auc: float
    n_benign: int
    n_malicious: int
    true_positives: int
    true_negatives: int
    false_positives: int
    false_negatives: int
    threshold: float = 0.5

    def to_dict(self):
        return asdict(self)


def evaluate(scores, labels, threshold=0.5):
    scores, positive = _check(scores, labels)
    predicted = scores >= threshold
    return EvalReport(
        balanced_accuracy=balanced_accuracy(scores, positive.astype(int), threshold),
        auc=auc(scores, positive.astype(int)),
        n_benign=int((~positive).sum()),
        n_malicious=int(positive.sum()),
        true_positives=int((predicted & positive).sum()),
        true_negatives=int((~predicted & ~positive).sum()),
        false_positives=int((predicted & ~positive).sum()),
        false_negatives=int((~predicted & positive).sum()),
        threshold=threshold,
    )
