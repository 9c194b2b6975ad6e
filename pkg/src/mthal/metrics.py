"""Prediction loss and support-recovery metrics.

Support metrics follow the benchmark convention for multi-task variable
selection: counts are over (task, covariate) pairs, precision is
TP/(TP+FP) and "accuracy" is TP/(TP+FN) (i.e. recall; the conventional
name in this literature is kept in reports).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def mse(pred, y, g=None) -> float:
    """Weighted mean squared error: sum g (pred-y)^2 / sum g (plain mean if g is None)."""
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    if pred.shape != y.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {y.shape}")
    sq = (pred - y) ** 2
    if g is None:
        return float(sq.mean())
    g = np.asarray(g, dtype=float)
    if g.shape != y.shape:
        raise ValueError(f"weights length mismatch: {g.shape} vs {y.shape}")
    return float(np.sum(g * sq) / np.sum(g))


PairSupport = set[tuple[int, str]]


def _as_pairs(support) -> PairSupport:
    if isinstance(support, dict):
        return {(task, cov) for task, covs in support.items() for cov in covs}
    return set(support)


@dataclass(frozen=True)
class SupportComparison:
    """True/false positive and false negative counts over (task, covariate) pairs."""

    true_positive: int
    false_positive: int
    false_negative: int
    precision_defined: bool

    @property
    def precision(self) -> float:
        """TP/(TP+FP) in percent; 100 (flagged undefined) when nothing was selected."""
        denom = self.true_positive + self.false_positive
        if denom == 0:
            return 100.0
        return 100.0 * self.true_positive / denom

    @property
    def accuracy(self) -> float:
        """TP/(TP+FN) in percent (recall); 100 when the true support is empty."""
        denom = self.true_positive + self.false_negative
        if denom == 0:
            return 100.0
        return 100.0 * self.true_positive / denom


def compare_support(estimated, truth) -> SupportComparison:
    """Count support overlaps; inputs are dicts task -> covariates or pair sets."""
    est = _as_pairs(estimated)
    tru = _as_pairs(truth)
    tp = len(est & tru)
    return SupportComparison(
        true_positive=tp,
        false_positive=len(est - tru),
        false_negative=len(tru - est),
        precision_defined=len(est) > 0 or len(tru) == 0,
    )


def support_metrics(estimated, truth) -> tuple[float, float]:
    """(precision %, accuracy %) of an estimated support against the truth."""
    cmp = compare_support(estimated, truth)
    return cmp.precision, cmp.accuracy


def dissimilarity(model, truth_fn, probe_rows) -> float:
    """Monte-Carlo squared-loss dissimilarity between a model and the truth.

    Mean over probe rows of (model prediction - true function value)^2, i.e.
    the squared L2 distance under the probe distribution. ``model`` may be a
    fitted model with ``predict`` or any callable on the probe rows.
    """
    pred = model.predict(probe_rows) if hasattr(model, "predict") else model(probe_rows)
    true_vals = truth_fn(probe_rows)
    pred = np.asarray(pred, dtype=float)
    true_vals = np.asarray(true_vals, dtype=float)
    return float(np.mean((pred - true_vals) ** 2))
