"""Focal loss, AUROC, MAE and the JSONL metrics log."""
import logging
import math
import os
import time

import numpy as np
import pandas as pd

from . import diff
from .errors import DegenerateLabels, DomainError, LengthMismatch
from .utils import Utils

logger = logging.getLogger('rel2prompt')

METRICS_KEYS = ('step', 'split', 'metric_name', 'value', 'loss', 'lr', 'wall_ms')


def class_alpha(label, alpha):
    """α_t: ``alpha`` for positives, ``1 - alpha`` for negatives."""
    return alpha if label == 1 else 1.0 - alpha


def focal_loss(p, alpha_t, gamma):
    """
    Mean of −α_t (1 − p)^γ log p over a batch.

    :param p: Probability of the true class, scalar or array, each in (0, 1].
    :param alpha_t: Class weight, scalar or array broadcastable to ``p``.
    :param gamma: Focusing parameter.
    :raises DomainError: If any p is outside (0, 1].
    """
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise LengthMismatch("focal_loss needs at least one probability")
    if np.any(p <= 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
        raise DomainError(f"Focal loss is defined for 0 < p <= 1, got min {p.min()}, max {p.max()}")
    return float(np.mean(-np.asarray(alpha_t) * (1.0 - p) ** gamma * np.log(p)))


def focal_loss_from_log_prob(log_p, alpha_t, gamma):
    """Differentiable focal loss for one example, from log p of the true class."""
    p = diff.exp(log_p)
    return -alpha_t * diff.power(1.0 - p, gamma) * log_p


def cross_entropy(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0):
        raise DomainError("Cross-entropy is undefined for p <= 0")
    return float(np.mean(-np.log(p)))


def auroc(scores, labels):
    """
    P(score⁺ > score⁻) + ½ P(tie) via the Mann-Whitney U statistic on average ranks.

    :raises LengthMismatch: If scores and labels differ in length.
    :raises DegenerateLabels: If only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise LengthMismatch(f"{scores.size} scores for {labels.size} labels")
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"AUROC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = pd.Series(scores).rank(method='average').to_numpy()
    u_statistic = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


def mae(preds, targets):
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise LengthMismatch(f"{preds.size} predictions for {targets.size} targets")
    if preds.size == 0:
        raise LengthMismatch("mae needs at least one prediction")
    return float(np.mean(np.abs(preds - targets)))


class MetricsLog:
    """Rows with the fixed keys of ``METRICS_KEYS``, appended to a JSONL file as they arrive."""

    def __init__(self, path=None, record_wall_time=False):
        self.path = path
        self.rows = []
        self.record_wall_time = record_wall_time
        self._start = time.perf_counter()
        if path and os.path.exists(path):
            os.remove(path)

    def append(self, step, split, metric_name, value, loss, lr, wall_ms=None):
        if wall_ms is None:
            # wall time stays 0 unless asked for, so repeated runs write identical files
            wall_ms = int((time.perf_counter() - self._start) * 1000) if self.record_wall_time else 0
        if self.rows and step < self.rows[-1]['step']:
            raise ValueError(f"Metrics steps must not decrease: {step} after {self.rows[-1]['step']}")
        if not (math.isfinite(value) and math.isfinite(loss)):
            raise ValueError(f"Metrics must be finite, got value={value}, loss={loss}")
        row = {'step': int(step), 'split': split, 'metric_name': metric_name, 'value': float(value),
               'loss': float(loss), 'lr': float(lr), 'wall_ms': int(wall_ms)}
        self.rows.append(row)
        if self.path:
            Utils.append_jsonl(row, self.path)
        logger.info(f"step {step} {split} {metric_name}={value:.6f} loss={loss:.6f} lr={lr:.3e}")
        return row

    def best(self, split, higher_is_better=True):
        rows = [r for r in self.rows if r['split'] == split]
        if not rows:
            return None
        return max(rows, key=lambda r: r['value'] if higher_is_better else -r['value'])

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=list(METRICS_KEYS))
