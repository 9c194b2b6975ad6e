"""Multi-task dataset containers: per-task data, stacking and standardization.

A multi-task problem is a list of tasks, each with its own covariate matrix,
outcome vector and optional observation weights / cluster labels. Tasks are
combined row-wise into a single stacked dataset whose membership vector records
which task each row belongs to. Covariates are matched across tasks by name, so
tasks may carry different (even non-overlapping) covariate sets.

All containers are immutable after construction and safe to share across
parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TaskDataset:
    """One task's data: covariates, outcomes and optional weights/clusters.

    Parameters
    ----------
    task_id : int
        Integer label of the task. Must be unique within a study.
    covariates : ndarray, shape (n_k, P_k)
        Covariate matrix. NaN entries are rejected.
    outcomes : ndarray, shape (n_k,)
        Outcome vector.
    weights : ndarray, shape (n_k,), optional
        Nonnegative observation weights, not all zero. Default is weight 1
        for every observation.
    cluster_ids : ndarray of int, shape (n_k,), optional
        Cluster labels (e.g. subject ids) used by clustered cross-validation.
    covariate_names : sequence of str, optional
        Column names; defaults to ``x1..xP``. Names are how covariates are
        matched across tasks.
    """

    task_id: int
    covariates: np.ndarray
    outcomes: np.ndarray
    weights: np.ndarray | None = None
    cluster_ids: np.ndarray | None = None
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim != 2:
            raise ValueError(f"covariates must be 2-d, got shape {cov.shape}")
        y = np.asarray(self.outcomes, dtype=float).ravel()
        n, p = cov.shape
        if y.shape[0] != n:
            raise ValueError(f"outcomes length {y.shape[0]} != covariate rows {n}")
        if np.isnan(cov).any():
            bad = np.argwhere(np.isnan(cov))[0]
            raise ValueError(f"NaN covariate at row {bad[0]}, column {bad[1]}")
        object.__setattr__(self, "covariates", _readonly(cov))
        object.__setattr__(self, "outcomes", _readonly(y))

        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).ravel()
            if w.shape[0] != n:
                raise ValueError(f"weights length {w.shape[0]} != covariate rows {n}")
            if (w < 0).any():
                raise ValueError("weights must be nonnegative")
            if not (w > 0).any():
                raise ValueError("weights must not be all zero")
            object.__setattr__(self, "weights", _readonly(w))

        if self.cluster_ids is not None:
            c = np.asarray(self.cluster_ids).ravel()
            if c.shape[0] != n:
                raise ValueError(f"cluster_ids length {c.shape[0]} != covariate rows {n}")
            object.__setattr__(self, "cluster_ids", _readonly(c))

        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise ValueError(f"{len(names)} covariate names for {p} columns")
        if len(set(names)) != p:
            raise ValueError("covariate names must be distinct")
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def effective_weights(self) -> np.ndarray:
        """Weights, defaulting to 1 per observation when absent."""
        if self.weights is None:
            return np.ones(self.n)
        return np.asarray(self.weights)


@dataclass(frozen=True)
class StackedDataset:
    """All tasks stacked row-wise, task-by-task in input order.

    ``task_membership[i]`` is the task id of row ``i``; ``row_offsets[k]`` is
    the first stacked row of the k-th task. The union covariate matrix places
    each task's columns by name and holds NaN where a task lacks a covariate
    (rows of such tasks never activate bases over those covariates).
    """

    tasks: tuple[TaskDataset, ...]
    task_membership: np.ndarray
    row_offsets: np.ndarray
    covariate_names: tuple[str, ...]
    covariates: np.ndarray
    outcomes: np.ndarray
    weights: np.ndarray
    cluster_ids: np.ndarray | None

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def task_ids(self) -> tuple[int, ...]:
        return tuple(t.task_id for t in self.tasks)

    def task_rows(self, task_id: int) -> np.ndarray:
        """Stacked row indices belonging to ``task_id``."""
        k = self.task_ids.index(task_id)
        start = int(self.row_offsets[k])
        end = start + self.tasks[k].n
        return np.arange(start, end)

    def task_columns(self, task_id: int) -> dict[str, int]:
        """Map of covariate name -> union column index for one task."""
        k = self.task_ids.index(task_id)
        return {name: self.covariate_names.index(name) for name in self.tasks[k].covariate_names}

    def subset(self, rows: np.ndarray) -> "StackedDataset":
        """Row subset as a new StackedDataset (tasks with no rows dropped)."""
        rows = np.asarray(rows)
        parts = []
        for k, task in enumerate(self.tasks):
            start = int(self.row_offsets[k])
            mask = (rows >= start) & (rows < start + task.n)
            local = np.sort(rows[mask]) - start
            if local.size == 0:
                continue
            parts.append(
                TaskDataset(
                    task_id=task.task_id,
                    covariates=task.covariates[local],
                    outcomes=task.outcomes[local],
                    weights=None if task.weights is None else task.weights[local],
                    cluster_ids=None if task.cluster_ids is None else task.cluster_ids[local],
                    covariate_names=task.covariate_names,
                )
            )
        return stack(parts)

    def split(self) -> list[TaskDataset]:
        """Recover the per-task datasets (inverse of :func:`stack`)."""
        return list(self.tasks)


def stack(tasks: Sequence[TaskDataset]) -> StackedDataset:
    """Combine tasks into one stacked dataset, rows ordered task-by-task.

    Parameters
    ----------
    tasks : sequence of TaskDataset
        At least one task; ids must be distinct and every task nonempty.

    Returns
    -------
    StackedDataset
    """
    tasks = tuple(tasks)
    if not tasks:
        raise ValueError("at least one task is required")
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids: {ids}")
    for t in tasks:
        if t.n == 0:
            raise ValueError(f"task {t.task_id} has zero rows")

    sizes = np.array([t.n for t in tasks])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    membership = np.repeat(ids, sizes)

    names: list[str] = []
    for t in tasks:
        for name in t.covariate_names:
            if name not in names:
                names.append(name)
    d = len(names)
    col_of = {name: j for j, name in enumerate(names)}

    n = int(sizes.sum())
    cov = np.full((n, d), np.nan)
    y = np.empty(n)
    w = np.empty(n)
    have_clusters = all(t.cluster_ids is not None for t in tasks)
    clusters = np.empty(n, dtype=np.asarray(tasks[0].cluster_ids).dtype) if have_clusters else None
    for k, t in enumerate(tasks):
        rows = slice(int(offsets[k]), int(offsets[k]) + t.n)
        for j, name in enumerate(t.covariate_names):
            cov[rows, col_of[name]] = t.covariates[:, j]
        y[rows] = t.outcomes
        w[rows] = t.effective_weights()
        if have_clusters:
            clusters[rows] = t.cluster_ids

    return StackedDataset(
        tasks=tasks,
        task_membership=_readonly(membership),
        row_offsets=_readonly(offsets),
        covariate_names=tuple(names),
        covariates=_readonly(cov),
        outcomes=_readonly(y),
        weights=_readonly(w),
        cluster_ids=None if clusters is None else _readonly(clusters),
    )


def task_balanced_weights(data: StackedDataset) -> StackedDataset:
    """Rescale weights by n/(K*n_k) so every task carries equal total weight."""
    n, K = data.n, data.n_tasks
    scale = np.empty(n)
    for k, task in enumerate(data.tasks):
        rows = data.task_rows(task.task_id)
        scale[rows] = n / (K * task.n)
    new_tasks = []
    for task in data.tasks:
        rows = data.task_rows(task.task_id)
        new_tasks.append(
            TaskDataset(
                task_id=task.task_id,
                covariates=task.covariates,
                outcomes=task.outcomes,
                weights=task.effective_weights() * scale[rows],
                cluster_ids=task.cluster_ids,
                covariate_names=task.covariate_names,
            )
        )
    return stack(new_tasks)


@dataclass(frozen=True)
class Standardizer:
    """Per-task, per-covariate location/scale fitted on training rows.

    ``loc[(task_id, name)]`` and ``scale[(task_id, name)]`` give the training
    mean and sample standard deviation (ddof=1). Constant columns keep scale 1
    and are flagged in ``constant``.
    """

    loc: dict[tuple[int, str], float]
    scale: dict[tuple[int, str], float]
    constant: frozenset[tuple[int, str]]


def standardize_fit(train: StackedDataset) -> Standardizer:
    """Fit per-task column means and sample standard deviations."""
    if train.n == 0:
        raise ValueError("training data is empty")
    loc: dict[tuple[int, str], float] = {}
    scale: dict[tuple[int, str], float] = {}
    constants = set()
    for task in train.tasks:
        for j, name in enumerate(task.covariate_names):
            x = task.covariates[:, j]
            m = float(x.mean())
            s = float(x.std(ddof=1)) if x.size > 1 else 0.0
            key = (task.task_id, name)
            loc[key] = m
            if s > 0:
                scale[key] = s
            else:
                scale[key] = 1.0
                constants.add(key)
    return Standardizer(loc=loc, scale=scale, constant=frozenset(constants))


def standardize_apply(s: Standardizer, data: StackedDataset) -> StackedDataset:
    """Apply fitted training statistics to ``data`` (which may be held out)."""
    new_tasks = []
    for task in data.tasks:
        cov = np.array(task.covariates)
        for j, name in enumerate(task.covariate_names):
            key = (task.task_id, name)
            if key not in s.loc:
                raise KeyError(f"no standardization statistics for task {task.task_id}, column {name!r}")
            cov[:, j] = (cov[:, j] - s.loc[key]) / s.scale[key]
        new_tasks.append(
            TaskDataset(
                task_id=task.task_id,
                covariates=cov,
                outcomes=task.outcomes,
                weights=task.weights,
                cluster_ids=task.cluster_ids,
                covariate_names=task.covariate_names,
            )
        )
    return stack(new_tasks)
