"""Fold construction and cross-validated penalty selection.

Two fold schemes are supported. Task-balanced folds shuffle each task's rows
independently and deal them round-robin, so every fold carries a near-equal
share of every task. Clustered folds keep all rows of a cluster (e.g. one
subject) together: clusters are shuffled, ordered largest first and dealt
round-robin, which approximately balances fold sizes.

Penalty selection rebuilds all data-dependent structure (knots, design,
standardization) on each fold's training rows only, fits the full penalty
path there, and averages validation risks per grid point across folds. The
grid itself is fixed once up front so risks are comparable columnwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed

from .data import StackedDataset
from .solver import fit_path

SCHEMES = ("task-balanced", "clustered")


@dataclass(frozen=True)
class FoldAssignment:
    """Row-to-fold map; fold labels run 1..n_folds."""

    fold_of_row: np.ndarray
    n_folds: int
    scheme: str

    def val_rows(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_row == v)

    def train_rows(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_row != v)


@dataclass(frozen=True)
class CvRiskTable:
    """Validation risk per penalty, per fold and averaged across folds."""

    grid: np.ndarray
    mean_risk: np.ndarray
    fold_risks: np.ndarray  # shape (n_folds, len(grid))

    def to_text(self) -> str:
        """Tab-separated rows: lambda, mean risk, then one column per fold."""
        V = self.fold_risks.shape[0]
        header = "lambda\tmean_risk\t" + "\t".join(f"fold{v + 1}" for v in range(V))
        lines = [header]
        for b in range(self.grid.size):
            per_fold = "\t".join(repr(float(x)) for x in self.fold_risks[:, b])
            lines.append(f"{self.grid[b]!r}\t{self.mean_risk[b]!r}\t{per_fold}")
        return "\n".join(lines)


def make_folds(
    data: StackedDataset, V: int, scheme: str = "task-balanced", seed: int = 0
) -> FoldAssignment:
    """Deterministic fold assignment under the given scheme and seed."""
    if V < 2:
        raise ValueError(f"V must be >= 2, got {V}")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    rng = np.random.default_rng(seed)
    fold_of_row = np.zeros(data.n, dtype=np.int64)

    if scheme == "task-balanced":
        smallest = min(t.n for t in data.tasks)
        if V > smallest:
            raise ValueError(f"V={V} exceeds the smallest task size {smallest}")
        for task in data.tasks:
            rows = data.task_rows(task.task_id)
            perm = rng.permutation(rows)
            fold_of_row[perm] = np.arange(perm.size) % V + 1
    else:
        if data.cluster_ids is None:
            raise ValueError("clustered folds require cluster_ids on every task")
        clusters, counts = np.unique(data.cluster_ids, return_counts=True)
        if V > clusters.size:
            raise ValueError(f"V={V} exceeds the number of clusters {clusters.size}")
        order = rng.permutation(clusters.size)
        order = order[np.argsort(-counts[order], kind="stable")]  # largest first
        fold_of_cluster = {clusters[c]: i % V + 1 for i, c in enumerate(order)}
        for cid, fold in fold_of_cluster.items():
            fold_of_row[data.cluster_ids == cid] = fold

    for v in range(1, V + 1):
        if not (fold_of_row == v).any():
            raise ValueError(f"fold {v} is empty")
    return FoldAssignment(fold_of_row=fold_of_row, n_folds=V, scheme=scheme)


def default_loss(pred: np.ndarray, y: np.ndarray, g: np.ndarray) -> float:
    """Mean weighted squared error over validation rows."""
    return float(np.mean(g * (y - pred) ** 2))


def _design_fit_outcomes(design, train):
    fn = getattr(design, "fit_outcomes", None)
    return train.outcomes if fn is None else fn(train)


def _design_offset(design, rows):
    fn = getattr(design, "prediction_offset", None)
    return 0.0 if fn is None else fn(rows)


def _one_fold(data, design_builder, grid, folds, v, loss, fit_kwargs):
    tr = data.subset(folds.train_rows(v))
    va = data.subset(folds.val_rows(v))
    missing = set(va.task_ids) - set(tr.task_ids)
    if missing:
        raise ValueError(
            f"fold {v}: validation tasks {sorted(missing)} absent from its training split"
        )
    design = design_builder(tr)
    path = fit_path(design, _design_fit_outcomes(design, tr), tr.weights, grid=grid, **fit_kwargs)
    E = design.evaluate(va)
    offset = _design_offset(design, va)
    risks = np.empty(grid.size)
    for b, state in enumerate(path.states):
        pred = offset + state.intercept + E @ state.beta
        risks[b] = loss(pred, va.outcomes, va.weights)
    return risks


def cv_select(
    data: StackedDataset,
    design_builder: Callable[[StackedDataset], object],
    lambda_grid: Sequence[float],
    folds: FoldAssignment,
    loss: Callable[[np.ndarray, np.ndarray, np.ndarray], float] | None = None,
    *,
    n_jobs: int = 1,
    **fit_kwargs,
) -> tuple[float, CvRiskTable]:
    """Pick the penalty with the lowest mean validation risk across folds.

    ``design_builder`` receives each fold's training rows and must return a
    fitted design (knots, basis, standardization all from those rows alone).
    Ties in the mean risk break toward the larger penalty (sparser model).
    """
    grid = np.asarray(list(lambda_grid), dtype=float)
    loss = loss or default_loss
    fold_ids = range(1, folds.n_folds + 1)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_one_fold)(data, design_builder, grid, folds, v, loss, fit_kwargs)
        for v in fold_ids
    )
    fold_risks = np.vstack(results)
    mean_risk = fold_risks.mean(axis=0)
    best = int(np.argmin(mean_risk))  # grid is descending: first argmin = largest lambda
    table = CvRiskTable(grid=grid, mean_risk=mean_risk, fold_risks=fold_risks)
    return float(grid[best]), table
