"""End-to-end estimators: the multi-task HAL model and two linear baselines.

The main estimator stacks the tasks, builds the indicator basis expansion,
selects the penalty by V-fold cross-validation (rebuilding knots and design
on each fold's training rows) and refits on all data at the selected
penalty. The baselines fit the same weighted squared-error group lasso on
raw standardized covariates: ``mt-lasso`` penalizes every per-task
coefficient individually and ``mt-l21`` groups each covariate across tasks.
All three share the same solver and cross-validation machinery, so
comparisons isolate the basis expansion.

Covariates enter the HAL design unstandardized by default: indicator bases
only depend on within-column value order, so standardization cannot change
the fit, and skipping it keeps predictions exactly invariant under strictly
increasing per-covariate transforms.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import basis as basis_mod
from .basis import GroupedDesign, build_design, catalog_from_lines, catalog_to_lines, enumerate_sections, select_knots
from .cv import CvRiskTable, FoldAssignment, cv_select, make_folds
from .data import (
    StackedDataset,
    Standardizer,
    TaskDataset,
    stack,
    standardize_apply,
    standardize_fit,
    task_balanced_weights,
)
from .solver import CoefficientState, PathResult, fit_path, lambda_max

SUPPORT_TOL = 1e-10
MODEL_FORMAT = "mthal-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class MtHalConfig:
    """Hyperparameters of the multi-task HAL pipeline.

    ``max_degree=None`` resolves to min(d, 3). ``per_covariate_max=None``
    keeps every observed value as a knot (the exhaustive preset; subject to
    the column budget).
    """

    max_degree: int | None = None
    per_covariate_max: int | None = 50
    task_interaction: bool = True
    column_budget: int = basis_mod.DEFAULT_COLUMN_BUDGET
    n_lambda: int = 50
    lambda_min_ratio: float = 1e-3
    tol: float = 1e-7
    max_iter: int = 100_000
    cv_folds: int = 5
    cv_scheme: str = "task-balanced"
    seed: int = 0
    standardize: bool = False
    task_balanced: bool = False
    n_jobs: int = 1


@dataclass(frozen=True)
class BaselineConfig:
    """Hyperparameters shared by the mt-lasso and mt-l21 baselines."""

    n_lambda: int = 50
    lambda_min_ratio: float = 1e-3
    tol: float = 1e-7
    max_iter: int = 100_000
    cv_folds: int = 5
    cv_scheme: str = "task-balanced"
    seed: int = 0
    standardize: bool = True
    task_balanced: bool = False
    n_jobs: int = 1


def _as_stacked(rows) -> StackedDataset:
    if isinstance(rows, StackedDataset):
        return rows
    return stack(rows)


class _StandardizedDesign:
    """Design wrapper that re-applies training standardization at evaluation."""

    def __init__(self, inner: GroupedDesign, standardizer: Standardizer):
        self.inner = inner
        self.standardizer = standardizer

    @property
    def matrix(self):
        return self.inner.matrix

    @property
    def group_starts(self):
        return self.inner.group_starts

    def evaluate(self, rows: StackedDataset):
        return self.inner.evaluate(standardize_apply(self.standardizer, rows))

    def predict(self, state, rows: StackedDataset):
        return state.intercept + self.evaluate(rows) @ state.beta


def _build_hal_design(train: StackedDataset, cfg: MtHalConfig):
    std = None
    fit_data = train
    if cfg.standardize:
        std = standardize_fit(train)
        fit_data = standardize_apply(std, train)
    d = len(fit_data.covariate_names)
    degree = cfg.max_degree if cfg.max_degree is not None else min(d, 3)
    per_cov = cfg.per_covariate_max if cfg.per_covariate_max is not None else fit_data.n
    sections = enumerate_sections(d, degree)
    knots = select_knots(fit_data, per_cov)
    design = build_design(
        fit_data,
        sections,
        knots,
        cfg.task_interaction,
        column_budget=cfg.column_budget,
    )
    if std is not None:
        return _StandardizedDesign(design, std)
    return design


@dataclass(frozen=True)
class MtHalModel:
    """Fitted multi-task HAL model."""

    design: GroupedDesign
    standardizer: Standardizer | None
    lambda_n: float
    state: CoefficientState
    cv_table: CvRiskTable
    path: PathResult | None
    config: MtHalConfig

    def predict(self, rows) -> np.ndarray:
        data = _as_stacked(rows)
        if self.standardizer is not None:
            data = standardize_apply(self.standardizer, data)
        return self.design.predict(self.state, data)

    def support(self) -> dict[int, set[str]]:
        """Per-task covariate support: a covariate is selected for a task when
        some basis over a section containing it has a nonzero coefficient for
        that task (shared columns select for every task)."""
        out: dict[int, set[str]] = {tid: set() for tid in self.design.task_ids}
        names = self.design.covariate_names
        for p, cols in enumerate(self.design.groups):
            section_names = {names[j] for j in self.design.basis_catalog[p].section.indices}
            for c in cols:
                if abs(self.state.beta[c]) <= SUPPORT_TOL:
                    continue
                tid = int(self.design.col_task[c])
                if tid == -1:
                    for t in self.design.task_ids:
                        out[t] |= section_names
                else:
                    out[tid] |= section_names
        return out


def fit_mthal(tasks: Sequence[TaskDataset], config: MtHalConfig | None = None, **overrides) -> MtHalModel:
    """Fit the multi-task HAL end to end.

    Stack -> folds -> per-fold (knots, design, path) -> penalty selection ->
    refit on all data at the selected penalty. The penalty grid is computed
    once from the full data and reused across folds.
    """
    cfg = dataclasses.replace(config or MtHalConfig(), **overrides)
    data = _as_stacked(tasks)
    if cfg.task_balanced:
        data = task_balanced_weights(data)

    design = _build_hal_design(data, cfg)
    lam_max = lambda_max(design, data.outcomes, data.weights)
    if lam_max > 0:
        grid = lam_max * cfg.lambda_min_ratio ** (np.arange(cfg.n_lambda) / max(cfg.n_lambda - 1, 1))
    else:
        grid = np.array([0.0])

    folds = make_folds(data, cfg.cv_folds, cfg.cv_scheme, cfg.seed)
    lam_n, table = cv_select(
        data,
        lambda train: _build_hal_design(train, cfg),
        grid,
        folds,
        n_jobs=cfg.n_jobs,
        tol=cfg.tol,
        max_iter=cfg.max_iter,
    )
    path = fit_path(
        design, data.outcomes, data.weights, grid=grid, tol=cfg.tol, max_iter=cfg.max_iter
    )
    state = path.state_at(lam_n)
    inner = design.inner if isinstance(design, _StandardizedDesign) else design
    std = design.standardizer if isinstance(design, _StandardizedDesign) else None
    return MtHalModel(
        design=inner,
        standardizer=std,
        lambda_n=lam_n,
        state=state,
        cv_table=table,
        path=path,
        config=cfg,
    )


def predict(model, rows) -> np.ndarray:
    """Predictions of a fitted model on new rows (known task ids required)."""
    return model.predict(rows)


def extract_support(model) -> dict[int, set[str]]:
    """Per-task sets of selected covariate names."""
    return model.support()


class LinearTaskDesign:
    """Raw-covariate design with one column per (covariate, task) pair.

    Outcomes are centered per task at fit time (per-task intercepts); the
    centers are added back to predictions. Columns are grouped per covariate
    across tasks for the l21 baseline and singly for the lasso baseline.
    """

    def __init__(self, kind, standardizer, task_centers, col_names, col_task,
                 group_starts, task_ids, covariate_names, matrix=None):
        self.kind = kind
        self.standardizer = standardizer
        self.task_centers = task_centers
        self.col_names = tuple(col_names)
        self.col_task = np.asarray(col_task, dtype=np.int64)
        self.group_starts = np.asarray(group_starts, dtype=np.int64)
        self.task_ids = tuple(task_ids)
        self.covariate_names = tuple(covariate_names)
        self.matrix = matrix

    @classmethod
    def build(cls, train: StackedDataset, kind: str, standardize: bool = True):
        std = standardize_fit(train) if standardize else None
        data = standardize_apply(std, train) if std is not None else train
        centers = {}
        for task in data.tasks:
            rows = data.task_rows(task.task_id)
            g = data.weights[rows]
            centers[task.task_id] = float(np.sum(g * data.outcomes[rows]) / np.sum(g))

        col_names: list[str] = []
        col_task: list[int] = []
        group_sizes: list[int] = []
        cols: list[np.ndarray] = []
        n = data.n
        for j, name in enumerate(data.covariate_names):
            owners = [t.task_id for t in data.tasks if name in t.covariate_names]
            for tid in owners:
                rows = data.task_rows(tid)
                col = np.zeros(n)
                col[rows] = data.covariates[rows, j]
                cols.append(col)
                col_names.append(name)
                col_task.append(tid)
            if kind == "mt-l21":
                group_sizes.append(len(owners))
            else:
                group_sizes.extend([1] * len(owners))
        matrix = np.column_stack(cols) if cols else np.zeros((n, 0))
        starts = np.concatenate([[0], np.cumsum(group_sizes)]) if group_sizes else np.array([0])
        return cls(
            kind=kind,
            standardizer=std,
            task_centers=centers,
            col_names=col_names,
            col_task=col_task,
            group_starts=starts,
            task_ids=data.task_ids,
            covariate_names=data.covariate_names,
            matrix=matrix,
        )

    def fit_outcomes(self, train: StackedDataset) -> np.ndarray:
        return train.outcomes - self.prediction_offset(train)

    def prediction_offset(self, rows: StackedDataset) -> np.ndarray:
        unknown = set(rows.task_ids) - set(self.task_ids)
        if unknown:
            raise ValueError(f"unknown task ids {sorted(unknown)}: prediction requires training tasks")
        return np.array([self.task_centers[int(t)] for t in rows.task_membership])

    def evaluate(self, rows: StackedDataset) -> np.ndarray:
        data = standardize_apply(self.standardizer, rows) if self.standardizer is not None else rows
        values = basis_mod._columns_by_name(data, self.covariate_names)
        name_col = {name: j for j, name in enumerate(self.covariate_names)}
        membership = data.task_membership
        out = np.zeros((data.n, len(self.col_names)))
        for c, (name, tid) in enumerate(zip(self.col_names, self.col_task)):
            mask = membership == tid
            if mask.any():
                out[mask, c] = values[mask, name_col[name]]
        return out

    def predict(self, state, rows: StackedDataset) -> np.ndarray:
        return self.prediction_offset(rows) + state.intercept + self.evaluate(rows) @ state.beta


@dataclass(frozen=True)
class BaselineModel:
    """Fitted mt-lasso or mt-l21 baseline."""

    kind: str
    design: LinearTaskDesign
    lambda_n: float
    state: CoefficientState
    cv_table: CvRiskTable
    path: PathResult | None
    config: BaselineConfig

    def predict(self, rows) -> np.ndarray:
        return self.design.predict(self.state, _as_stacked(rows))

    def coefficients(self) -> dict[tuple[int, str], float]:
        """Raw-covariate coefficients keyed by (task id, covariate name)."""
        return {
            (int(tid), name): float(b)
            for name, tid, b in zip(self.design.col_names, self.design.col_task, self.state.beta)
        }

    def intercepts(self) -> dict[int, float]:
        return {tid: c + self.state.intercept for tid, c in self.design.task_centers.items()}

    def support(self) -> dict[int, set[str]]:
        out: dict[int, set[str]] = {tid: set() for tid in self.design.task_ids}
        for (tid, name), b in self.coefficients().items():
            if abs(b) > SUPPORT_TOL:
                out[tid].add(name)
        return out


BASELINE_KINDS = ("mt-lasso", "mt-l21")


def fit_baseline(kind: str, tasks: Sequence[TaskDataset], config: BaselineConfig | None = None,
                 **overrides) -> BaselineModel:
    """Fit one of the sparse linear baselines with cross-validated penalty."""
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}, expected one of {BASELINE_KINDS}")
    cfg = dataclasses.replace(config or BaselineConfig(), **overrides)
    data = _as_stacked(tasks)
    if cfg.task_balanced:
        data = task_balanced_weights(data)

    design = LinearTaskDesign.build(data, kind, cfg.standardize)
    y_fit = design.fit_outcomes(data)
    lam_max = lambda_max(design, y_fit, data.weights)
    if lam_max > 0:
        grid = lam_max * cfg.lambda_min_ratio ** (np.arange(cfg.n_lambda) / max(cfg.n_lambda - 1, 1))
    else:
        grid = np.array([0.0])

    folds = make_folds(data, cfg.cv_folds, cfg.cv_scheme, cfg.seed)
    lam_n, table = cv_select(
        data,
        lambda train: LinearTaskDesign.build(train, kind, cfg.standardize),
        grid,
        folds,
        n_jobs=cfg.n_jobs,
        tol=cfg.tol,
        max_iter=cfg.max_iter,
    )
    path = fit_path(design, y_fit, data.weights, grid=grid, tol=cfg.tol, max_iter=cfg.max_iter)
    state = path.state_at(lam_n)
    return BaselineModel(
        kind=kind, design=design, lambda_n=lam_n, state=state,
        cv_table=table, path=path, config=cfg,
    )


def _standardizer_arrays(std: Standardizer | None):
    if std is None:
        return dict(
            std_task=np.zeros(0, dtype=np.int64),
            std_name=np.zeros(0, dtype="U1"),
            std_loc=np.zeros(0),
            std_scale=np.zeros(0),
            std_const=np.zeros(0, dtype=bool),
        )
    keys = sorted(std.loc)
    return dict(
        std_task=np.array([k[0] for k in keys], dtype=np.int64),
        std_name=np.array([k[1] for k in keys]),
        std_loc=np.array([std.loc[k] for k in keys]),
        std_scale=np.array([std.scale[k] for k in keys]),
        std_const=np.array([k in std.constant for k in keys], dtype=bool),
    )


def _standardizer_from_arrays(arrs) -> Standardizer | None:
    tasks = arrs["std_task"]
    if tasks.size == 0:
        return None
    names = arrs["std_name"]
    keys = [(int(t), str(n)) for t, n in zip(tasks, names)]
    return Standardizer(
        loc={k: float(v) for k, v in zip(keys, arrs["std_loc"])},
        scale={k: float(v) for k, v in zip(keys, arrs["std_scale"])},
        constant=frozenset(k for k, c in zip(keys, arrs["std_const"]) if c),
    )


def save_model(model, path: str) -> None:
    """Write a fitted model to a single self-describing archive (atomic)."""
    if isinstance(model, MtHalModel):
        header = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": "mthal",
            "lambda_n": model.lambda_n,
            "intercept": model.state.intercept,
            "task_ids": list(model.design.task_ids),
            "covariate_names": list(model.design.covariate_names),
            "n_train_rows": model.design.n_train_rows,
            "config": dataclasses.asdict(model.config),
        }
        arrays = dict(
            beta=model.state.beta,
            group_starts=model.state.group_starts,
            col_basis=model.design.col_basis,
            col_task=model.design.col_task,
            cv_grid=model.cv_table.grid,
            cv_mean=model.cv_table.mean_risk,
            cv_folds=model.cv_table.fold_risks,
            catalog=np.array("\n".join(catalog_to_lines(model.design))),
            **_standardizer_arrays(model.standardizer),
        )
    elif isinstance(model, BaselineModel):
        d = model.design
        header = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": "baseline",
            "baseline": model.kind,
            "lambda_n": model.lambda_n,
            "intercept": model.state.intercept,
            "task_ids": list(d.task_ids),
            "covariate_names": list(d.covariate_names),
            "task_centers": {str(k): v for k, v in d.task_centers.items()},
            "col_names": list(d.col_names),
            "config": dataclasses.asdict(model.config),
        }
        arrays = dict(
            beta=model.state.beta,
            group_starts=model.state.group_starts,
            col_task=d.col_task,
            cv_grid=model.cv_table.grid,
            cv_mean=model.cv_table.mean_risk,
            cv_folds=model.cv_table.fold_risks,
            **_standardizer_arrays(d.standardizer),
        )
    else:
        raise TypeError(f"cannot save model of type {type(model).__name__}")
    buf = io.BytesIO()
    np.savez_compressed(buf, header=np.array(json.dumps(header)), **arrays)
    _atomic_write_bytes(path, buf.getvalue())


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path: str):
    """Load a model archive written by :func:`save_model`."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != MODEL_FORMAT:
            raise ValueError(f"{path}: not a model archive")
        if header.get("version") != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported model version {header.get('version')}")
        arrays = {k: z[k] for k in z.files if k != "header"}

    std = _standardizer_from_arrays(arrays)
    state = CoefficientState(
        intercept=float(header["intercept"]),
        beta=arrays["beta"],
        group_starts=arrays["group_starts"],
    )
    table = CvRiskTable(grid=arrays["cv_grid"], mean_risk=arrays["cv_mean"], fold_risks=arrays["cv_folds"])

    if header["kind"] == "mthal":
        catalog, donors = catalog_from_lines(str(arrays["catalog"]).splitlines())
        col_basis = arrays["col_basis"]
        groups = tuple(np.flatnonzero(col_basis == p) for p in range(len(catalog)))
        design = GroupedDesign(
            matrix=None,
            basis_catalog=tuple(catalog),
            groups=groups,
            col_basis=col_basis,
            col_task=arrays["col_task"],
            intercept=True,
            task_ids=tuple(int(t) for t in header["task_ids"]),
            covariate_names=tuple(header["covariate_names"]),
            donor_bases=tuple(tuple(d) for d in donors),
            n_train_rows=int(header["n_train_rows"]),
        )
        return MtHalModel(
            design=design,
            standardizer=std,
            lambda_n=float(header["lambda_n"]),
            state=state,
            cv_table=table,
            path=None,
            config=MtHalConfig(**header["config"]),
        )
    if header["kind"] == "baseline":
        design = LinearTaskDesign(
            kind=header["baseline"],
            standardizer=std,
            task_centers={int(k): float(v) for k, v in header["task_centers"].items()},
            col_names=header["col_names"],
            col_task=arrays["col_task"],
            group_starts=arrays["group_starts"],
            task_ids=tuple(int(t) for t in header["task_ids"]),
            covariate_names=tuple(header["covariate_names"]),
            matrix=None,
        )
        return BaselineModel(
            kind=header["baseline"],
            design=design,
            lambda_n=float(header["lambda_n"]),
            state=state,
            cv_table=table,
            path=None,
            config=BaselineConfig(**header["config"]),
        )
    raise ValueError(f"{path}: unknown model kind {header['kind']!r}")
