"""Data-adaptive indicator basis expansion with per-task column groups.

Bases are zero-order indicator functions anchored at observed covariate
values: a basis over a section (subset of covariates) with knot vector ``t``
evaluates to 1 on ``w`` iff ``w_j >= t_j`` for every covariate ``j`` in the
section (inclusive boundary, right-continuous steps). Knots come from the
training data itself, optionally thinned to per-covariate quantile grids;
row values are snapped down onto those grids so each section contributes at
most one basis per training row.

The design matrix holds one column per (basis, task) pair when task
interactions are on, with the columns of one basis forming a group; with
interactions off each basis is a single column shared by all tasks and forms
its own singleton group. Exact duplicate bases (identical activation pattern
on the training rows) are merged, and degenerate columns (all zeros, or all
ones and hence absorbed by the unpenalized intercept) are removed.

Construction parallelizes over sections in principle; here it is a
deterministic sequential loop in section order, and the result is immutable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .data import StackedDataset

DEFAULT_COLUMN_BUDGET = 200_000


@dataclass(frozen=True)
class Section:
    """An ordered subset of covariate indices over which a basis interacts."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise ValueError("a section must contain at least one covariate")
        if list(idx) != sorted(set(idx)):
            raise ValueError(f"section indices must be sorted and distinct: {idx}")
        object.__setattr__(self, "indices", idx)

    @property
    def cardinality(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class BasisFunction:
    """Indicator basis: section, knot vector, and the row that donated it."""

    section: Section
    knot: tuple[float, ...]
    source_row: int

    def __post_init__(self):
        if len(self.knot) != self.section.cardinality:
            raise ValueError("knot length must equal section cardinality")
        object.__setattr__(self, "knot", tuple(float(v) for v in self.knot))


def evaluate_basis(b: BasisFunction, w: np.ndarray) -> int:
    """Evaluate one basis on a covariate vector: 1 iff w >= knot coordinatewise."""
    w = np.asarray(w, dtype=float)
    vals = w[list(b.section.indices)]
    return int(np.all(vals >= np.asarray(b.knot)))


def enumerate_sections(d: int, max_degree: int) -> list[Section]:
    """All nonempty covariate subsets of size <= max_degree.

    Ordered by (cardinality, lexicographic); at ``max_degree == d`` this is
    the full 2^d - 1 enumeration.
    """
    if max_degree < 1:
        raise ValueError(f"max_degree must be >= 1, got {max_degree}")
    max_degree = min(max_degree, d)
    out = []
    for r in range(1, max_degree + 1):
        for combo in itertools.combinations(range(d), r):
            out.append(Section(indices=combo))
    return out


def select_knots(train: StackedDataset, per_covariate_max: int) -> dict[int, np.ndarray]:
    """Per-covariate knot values: all distinct observed values, or a quantile grid.

    A covariate with more than ``per_covariate_max`` distinct values is thinned
    to the empirical quantiles at levels j/(per_covariate_max+1), taken with the
    "lower" rule so knots are observed values; duplicates are collapsed.
    """
    if per_covariate_max < 1:
        raise ValueError(f"per_covariate_max must be >= 1, got {per_covariate_max}")
    knots: dict[int, np.ndarray] = {}
    for j in range(len(train.covariate_names)):
        col = train.covariates[:, j]
        observed = col[~np.isnan(col)]
        distinct = np.unique(observed)
        if distinct.size <= per_covariate_max:
            knots[j] = distinct
        else:
            levels = np.arange(1, per_covariate_max + 1) / (per_covariate_max + 1)
            qs = np.quantile(observed, levels, method="lower")
            knots[j] = np.unique(qs)
    return knots


@dataclass(frozen=True)
class GroupedDesign:
    """Sparse binary design with one column group per surviving basis.

    ``matrix`` is the n x m training design (None when reconstructed from a
    serialized catalog, where only out-of-sample evaluation is needed).
    ``groups[p]`` lists the column indices of basis p; columns within a group
    are ordered by task. ``col_task[c]`` is the task id owning column c, or -1
    for a column shared by all tasks. ``donor_bases[p]`` records every basis
    merged into representative p (itself first).
    """

    matrix: sp.csc_matrix | None
    basis_catalog: tuple[BasisFunction, ...]
    groups: tuple[np.ndarray, ...]
    col_basis: np.ndarray
    col_task: np.ndarray
    intercept: bool
    task_ids: tuple[int, ...]
    covariate_names: tuple[str, ...]
    donor_bases: tuple[tuple[BasisFunction, ...], ...]
    n_train_rows: int

    @property
    def n_columns(self) -> int:
        return self.col_basis.shape[0]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def group_starts(self) -> np.ndarray:
        """Group boundary offsets; columns of one group are contiguous."""
        sizes = np.array([len(g) for g in self.groups], dtype=np.int64)
        return np.concatenate([[0], np.cumsum(sizes)])

    def evaluate(self, rows: StackedDataset) -> sp.csc_matrix:
        return evaluate_design(self, rows)

    def predict(self, state, rows: StackedDataset) -> np.ndarray:
        """Model predictions for new rows under a fitted coefficient state."""
        return state.intercept + self.evaluate(rows) @ state.beta


def _columns_by_name(data: StackedDataset, names: Sequence[str]) -> np.ndarray:
    """Union covariate matrix of ``data`` re-indexed to the given name order."""
    out = np.full((data.n, len(names)), np.nan)
    pos = {name: j for j, name in enumerate(data.covariate_names)}
    for j, name in enumerate(names):
        if name in pos:
            out[:, j] = data.covariates[:, pos[name]]
    return out


def _task_column_sets(data: StackedDataset) -> dict[int, frozenset[int]]:
    name_to_col = {name: j for j, name in enumerate(data.covariate_names)}
    return {
        t.task_id: frozenset(name_to_col[name] for name in t.covariate_names)
        for t in data.tasks
    }


def _snap_down(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Largest grid knot <= value; values below the grid clamp to its minimum."""
    idx = np.searchsorted(grid, values, side="right") - 1
    idx = np.clip(idx, 0, grid.size - 1)
    return grid[idx]


def _section_candidates(train, section, knots, task_cols):
    """Distinct snapped knot tuples for one section, in first-donor-row order.

    Returns (knot_matrix, donor_rows, supporting_task_ids); the knot matrix is
    (m_s, |s|). Supporting tasks are those possessing every covariate in the
    section.
    """
    needed = set(section.indices)
    supporting = [tid for tid in train.task_ids if needed <= task_cols[tid]]
    if not supporting:
        return np.empty((0, len(needed))), np.empty(0, dtype=int), []
    row_idx = np.concatenate([train.task_rows(tid) for tid in supporting])
    row_idx.sort()
    vals = train.covariates[np.ix_(row_idx, list(section.indices))]
    snapped = np.column_stack(
        [_snap_down(vals[:, c], knots[j]) for c, j in enumerate(section.indices)]
    )
    uniq, first = np.unique(snapped, axis=0, return_index=True)
    order = np.argsort(first, kind="stable")
    return uniq[order], row_idx[first[order]], supporting


def _activation(train_values: np.ndarray, section: Section, knot_matrix: np.ndarray) -> np.ndarray:
    """Boolean n x m_s activation of a section's bases on given union values."""
    n = train_values.shape[0]
    act = np.ones((n, knot_matrix.shape[0]), dtype=bool)
    for c, j in enumerate(section.indices):
        act &= train_values[:, j][:, None] >= knot_matrix[None, :, c]
    return act


def build_design(
    train: StackedDataset,
    sections: Sequence[Section],
    knots: dict[int, np.ndarray],
    task_interaction: bool = True,
    *,
    dedup: bool = True,
    prune: bool = True,
    column_budget: int = DEFAULT_COLUMN_BUDGET,
) -> GroupedDesign:
    """Build the grouped sparse binary design from training data.

    For each section, every training row of a supporting task donates one
    candidate basis (its section values snapped down to the knot grids,
    distinct tuples only). With ``task_interaction`` each surviving basis gets
    one column per supporting task, masked to that task's rows; otherwise one
    shared column. ``dedup`` merges bases with identical training activation
    (earliest kept, in section-then-donor-row order); ``prune`` removes
    all-zero and all-one columns.
    """
    n = train.n
    membership = train.task_membership
    task_rows = {tid: np.flatnonzero(membership == tid) for tid in train.task_ids}
    task_cols = _task_column_sets(train)

    catalog: list[BasisFunction] = []
    donors: list[list[BasisFunction]] = []
    col_rows: list[np.ndarray] = []     # per column: active row indices
    group_cols: list[list[int]] = []    # per basis: its column ids
    col_basis: list[int] = []
    col_task: list[int] = []
    seen: dict[bytes, int] = {}
    candidate_columns = 0

    for section in sections:
        knot_matrix, donor_rows, supporting = _section_candidates(train, section, knots, task_cols)
        m_s = knot_matrix.shape[0]
        if m_s == 0:
            continue
        owners = supporting if task_interaction else [-1]
        candidate_columns += m_s * len(owners)
        if candidate_columns > column_budget:
            raise ValueError(
                f"design would exceed the column budget of {column_budget} columns; "
                f"reduce max_degree or per_covariate_max, or raise column_budget"
            )
        act = _activation(train.covariates, section, knot_matrix)
        packed = np.packbits(act, axis=0)
        # per-owner activation counts, vectorized over the section's bases
        owner_counts = {
            tid: (act.sum(axis=0) if tid == -1 else act[task_rows[tid]].sum(axis=0))
            for tid in owners
        }

        kept_local: list[int] = []
        kept_owner_cols: list[list[int]] = []
        for b in range(m_s):
            basis = BasisFunction(
                section=section,
                knot=tuple(knot_matrix[b]),
                source_row=int(donor_rows[b]),
            )
            if dedup:
                hit = seen.get(packed[:, b].tobytes())
                if hit is not None:
                    donors[hit].append(basis)
                    continue
            owner_ids = []
            for tid in owners:
                nnz = int(owner_counts[tid][b])
                if prune and (nnz == 0 or nnz == n):
                    continue
                owner_ids.append(tid)
            if not owner_ids:
                continue
            basis_index = len(catalog)
            catalog.append(basis)
            donors.append([basis])
            if dedup:
                seen[packed[:, b].tobytes()] = basis_index
            ids = []
            for tid in owner_ids:
                ids.append(len(col_basis))
                col_basis.append(basis_index)
                col_task.append(tid)
            group_cols.append(ids)
            kept_local.append(b)
            kept_owner_cols.append(owner_ids)

        # batch row extraction for the kept columns, in column-id order
        extracted: dict[tuple[int, int], np.ndarray] = {}
        for tid in owners:
            locs = [b for b, ow in zip(kept_local, kept_owner_cols) if tid in ow]
            if not locs:
                continue
            rows_t = np.arange(n) if tid == -1 else task_rows[tid]
            sub = act[np.ix_(rows_t, locs)]
            j, i = np.nonzero(sub.T)
            splits = np.searchsorted(j, np.arange(1, len(locs)))
            for b, rr in zip(locs, np.split(rows_t[i], splits)):
                extracted[(b, tid)] = rr
        for b, ow in zip(kept_local, kept_owner_cols):
            for tid in ow:
                col_rows.append(extracted[(b, tid)])

    m = len(col_rows)
    indptr = np.zeros(m + 1, dtype=np.int64)
    if m:
        indptr[1:] = np.cumsum([r.size for r in col_rows])
        indices = np.concatenate(col_rows) if m else np.empty(0, dtype=np.int64)
    else:
        indices = np.empty(0, dtype=np.int64)
    data_vals = np.ones(indices.size)
    matrix = sp.csc_matrix((data_vals, indices, indptr), shape=(n, m))

    return GroupedDesign(
        matrix=matrix,
        basis_catalog=tuple(catalog),
        groups=tuple(np.asarray(g, dtype=np.int64) for g in group_cols),
        col_basis=np.asarray(col_basis, dtype=np.int64),
        col_task=np.asarray(col_task, dtype=np.int64),
        intercept=True,
        task_ids=tuple(train.task_ids),
        covariate_names=tuple(train.covariate_names),
        donor_bases=tuple(tuple(d) for d in donors),
        n_train_rows=n,
    )


def evaluate_design(design: GroupedDesign, new_rows: StackedDataset) -> sp.csc_matrix:
    """Evaluate the trained bases on new rows, columns in training order.

    Rows of task k activate only task k's columns within each group; shared
    columns (no task interaction) activate for every row. Task ids must have
    been seen in training.
    """
    unknown = set(new_rows.task_ids) - set(design.task_ids)
    if unknown:
        raise ValueError(f"unknown task ids {sorted(unknown)}: prediction requires training tasks")

    values = _columns_by_name(new_rows, design.covariate_names)
    n = new_rows.n
    membership = new_rows.task_membership
    task_row_idx = {tid: np.flatnonzero(membership == tid) for tid in new_rows.task_ids}

    rows_acc: list[np.ndarray] = []
    cols_acc: list[np.ndarray] = []
    for section, block in itertools.groupby(
        range(len(design.basis_catalog)), key=lambda p: design.basis_catalog[p].section
    ):
        block = list(block)
        knot_matrix = np.array([design.basis_catalog[p].knot for p in block])
        act = _activation(values, section, knot_matrix)
        # batch per owning task: one nonzero() pass per (section, task)
        by_owner: dict[int, tuple[list[int], list[int]]] = {}
        for local, p in enumerate(block):
            for c in design.groups[p]:
                tid = int(design.col_task[c])
                locs, cids = by_owner.setdefault(tid, ([], []))
                locs.append(local)
                cids.append(int(c))
        for tid, (locs, cids) in by_owner.items():
            if tid == -1:
                rows_t = np.arange(n)
            else:
                rows_t = task_row_idx.get(tid)
                if rows_t is None or rows_t.size == 0:
                    continue
            sub = act[np.ix_(rows_t, locs)]
            i, j = np.nonzero(sub)
            if i.size:
                rows_acc.append(rows_t[i])
                cols_acc.append(np.asarray(cids, dtype=np.int64)[j])

    if rows_acc:
        r = np.concatenate(rows_acc)
        c = np.concatenate(cols_acc)
        vals = np.ones(r.size)
    else:
        r = c = np.empty(0, dtype=np.int64)
        vals = np.empty(0)
    return sp.csc_matrix((vals, (r, c)), shape=(n, design.n_columns))


def catalog_to_lines(design: GroupedDesign) -> list[str]:
    """Serialize the basis catalog to a line-oriented audit/persistence format.

    One line per basis: group id, section indices, knot values (shortest exact
    decimal form), donor row. Merged duplicates follow on ``dup`` lines.
    """
    lines = ["# mthal-basis-catalog v1"]
    for p, basis in enumerate(design.basis_catalog):
        lines.append(_basis_line("basis", p, basis))
        for dup in design.donor_bases[p][1:]:
            lines.append(_basis_line("dup", p, dup))
    return lines


def _basis_line(kind: str, group: int, basis: BasisFunction) -> str:
    sec = ",".join(str(i) for i in basis.section.indices)
    knot = ",".join(repr(v) for v in basis.knot)
    return f"{kind} group={group} section={sec} knot={knot} source_row={basis.source_row}"


def catalog_from_lines(lines: Iterable[str]) -> tuple[list[BasisFunction], list[list[BasisFunction]]]:
    """Parse :func:`catalog_to_lines` output back into catalog and donor lists."""
    catalog: list[BasisFunction] = []
    donors: list[list[BasisFunction]] = []
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        kind, rest = line.split(" ", 1)
        fields = dict(part.split("=", 1) for part in rest.split(" "))
        basis = BasisFunction(
            section=Section(indices=tuple(int(i) for i in fields["section"].split(","))),
            knot=tuple(float(v) for v in fields["knot"].split(",")),
            source_row=int(fields["source_row"]),
        )
        group = int(fields["group"])
        if kind == "basis":
            if group != len(catalog):
                raise ValueError(f"catalog lines out of order at group {group}")
            catalog.append(basis)
            donors.append([basis])
        elif kind == "dup":
            donors[group].append(basis)
        else:
            raise ValueError(f"unknown catalog line kind {kind!r}")
    return catalog, donors
