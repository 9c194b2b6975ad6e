"""Weighted squared-error group lasso solved along a penalty path.

The problem is

    min over (b0, beta)   sum_i g_i (y_i - b0 - (X beta)_i)^2 + lam * sum_p ||beta_p||_2

with columns of ``X`` partitioned into contiguous groups ``p``. The intercept
is unpenalized and profiled out in closed form (equivalently, updated exactly
at every step): the smooth part is minimized over ``b0`` analytically, which
amounts to weighted centering of ``y`` and of the columns of ``X``. Centering
is applied implicitly through a rank-one correction so the design stays
sparse.

The optimizer is accelerated proximal gradient with a monotone restart (the
objective never increases across accepted iterates) and a backtracking
fallback on the step size. The Lipschitz constant comes from 20 power
iterations on the curvature operator with a 1.1 safety factor. Inactive
groups are screened with a sequential strong rule and solved on a working
set; a final full pass over all groups certifies the Karush-Kuhn-Tucker
conditions of the returned state, so screening never changes the solution.

Solutions are deterministic: identical inputs produce bit-identical paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

_DENSE_SUBPROBLEM_ENTRIES = 4_000_000
_INNER_CHECK_EVERY = 10
_MAX_WORKING_SET_PASSES = 50


class PlainDesign(NamedTuple):
    """Minimal design wrapper: a matrix plus contiguous group boundaries."""

    matrix: object
    group_starts: np.ndarray


@dataclass(frozen=True)
class CoefficientState:
    """Intercept plus grouped coefficients of one fitted model."""

    intercept: float
    beta: np.ndarray
    group_starts: np.ndarray

    def group_norms(self) -> np.ndarray:
        return _group_norms(self.beta, self.group_starts)

    def group_l21_norm(self) -> float:
        """Sum over groups of the Euclidean norm of the group's coefficients."""
        return float(self.group_norms().sum())

    def l1_norm(self) -> float:
        return float(np.abs(self.beta).sum())

    def active_groups(self) -> np.ndarray:
        """Indices of groups with a nonzero coefficient vector."""
        return np.flatnonzero(self.group_norms() > 0)

    @property
    def n_active(self) -> int:
        return int(self.active_groups().size)


@dataclass(frozen=True)
class PathResult:
    """Solutions along a descending penalty grid."""

    lambda_grid: np.ndarray
    states: tuple[CoefficientState, ...]
    objectives: np.ndarray
    kkt_residuals: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    history: tuple[np.ndarray, ...] | None = None

    def active_counts(self) -> np.ndarray:
        return np.array([s.n_active for s in self.states])

    def state_at(self, lam: float) -> CoefficientState:
        j = int(np.argmin(np.abs(self.lambda_grid - lam)))
        if not np.isclose(self.lambda_grid[j], lam):
            raise KeyError(f"lambda {lam} is not on the fitted grid")
        return self.states[j]

    def to_table(self) -> str:
        """Tab-separated rows: lambda, objective, active group count, KKT residual."""
        lines = ["lambda\tobjective\tactive_groups\tkkt_residual"]
        for lam, obj, a, r in zip(
            self.lambda_grid, self.objectives, self.active_counts(), self.kkt_residuals
        ):
            lines.append(f"{lam!r}\t{obj!r}\t{a}\t{r!r}")
        return "\n".join(lines)


def _group_norms(v: np.ndarray, starts: np.ndarray) -> np.ndarray:
    if v.size == 0:
        return np.zeros(0)
    return np.sqrt(np.add.reduceat(v * v, starts[:-1]))


def group_soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    """Proximal operator of t * ||.||_2: shrink toward zero, or zero out.

    Returns 0 when ||v||_2 <= t (ties shrink to exactly zero), otherwise
    (1 - t / ||v||_2) * v.
    """
    if t < 0:
        raise ValueError("threshold must be nonnegative")
    v = np.asarray(v, dtype=float)
    norm = float(np.linalg.norm(v))
    if norm <= t:
        return np.zeros_like(v)
    return (1.0 - t / norm) * v


def _prox_groups(v, starts, sizes, thresh):
    """Groupwise shrinkage; ``thresh`` may be scalar or one value per group."""
    norms = _group_norms(v, starts)
    scale = np.where(norms <= thresh, 0.0, 1.0 - thresh / np.where(norms > 0, norms, 1.0))
    return v * np.repeat(scale, sizes)


def _as_matrix(design):
    X = design.matrix
    if X is None:
        raise ValueError("design has no training matrix (deserialized catalog-only design)")
    return X


def _weights_or_ones(y, g):
    if g is None:
        return np.ones(y.shape[0])
    g = np.asarray(g, dtype=float)
    if (g < 0).any():
        raise ValueError("weights must be nonnegative")
    return g


def objective(state: CoefficientState, design, y, g, lam: float) -> float:
    """Weighted residual sum of squares plus lam times the group l2,1 norm."""
    X = _as_matrix(design)
    y = np.asarray(y, dtype=float)
    g = _weights_or_ones(y, g)
    r = y - state.intercept - X @ state.beta
    return float(np.sum(g * r * r) + lam * state.group_l21_norm())


def kkt_residual(state: CoefficientState, design, y, g, lam: float) -> float:
    """Optimality certificate for the convex program at the given state.

    For active groups the stationarity defect ||grad_p + lam beta_p/||beta_p||||,
    for zero groups the subgradient slack max(0, ||grad_p|| - lam), maximized
    over groups, plus the absolute intercept gradient.
    """
    X = _as_matrix(design)
    y = np.asarray(y, dtype=float)
    g = _weights_or_ones(y, g)
    starts = np.asarray(design.group_starts)
    r = y - state.intercept - X @ state.beta
    u = g * r
    grad = -2.0 * (X.T @ u)
    group_term = _kkt_group_terms(grad, state.beta, starts, lam).max(initial=0.0)
    intercept_grad = -2.0 * float(u.sum())
    return float(group_term + abs(intercept_grad))


def _kkt_group_terms(grad, beta, starts, lam):
    """Per-group KKT defect; ``lam`` may be scalar or one value per group."""
    sizes = np.diff(starts)
    bnorms = _group_norms(beta, starts)
    active = bnorms > 0
    safe = np.where(active, bnorms, 1.0)
    direction = beta * np.repeat(np.where(active, lam / safe, 0.0), sizes)
    station = _group_norms(grad + direction, starts)
    slack = np.maximum(0.0, _group_norms(grad, starts) - lam)
    return np.where(active, station, slack)


def lambda_max(design, y, g=None) -> float:
    """Smallest penalty at which the intercept-only model is optimal."""
    X = _as_matrix(design)
    y = np.asarray(y, dtype=float)
    g = _weights_or_ones(y, g)
    starts = np.asarray(design.group_starts)
    b0 = float(np.sum(g * y) / np.sum(g))
    u = g * (y - b0)
    grad = 2.0 * (X.T @ u)
    if grad.size == 0:
        return 0.0
    return float(_group_norms(grad, starts).max())


class _Centered:
    """Implicitly column-centered, column-scaled design: (X - 1 c^T) D.

    ``col_scale`` normalizes column blocks (one shared factor per group) so
    the curvature spectrum is less spread out; the solved problem is an exact
    reparametrization of the original one.
    """

    def __init__(self, X, g, col_scale=None):
        X = sp.csc_matrix(X) if sp.issparse(X) else np.asarray(X, dtype=float)
        self.g = g
        self.gsum = float(g.sum())
        c = np.asarray(X.T @ g).ravel() / self.gsum
        if col_scale is not None:
            if sp.issparse(X):
                X = X.copy()
                X.data = X.data * np.repeat(col_scale, np.diff(X.indptr))
            else:
                X = X * col_scale[None, :]
            c = c * col_scale
        self.X = X
        self.c = c

    def matvec(self, beta):
        return self.X @ beta - float(self.c @ beta)

    def rmatvec_weighted(self, r):
        """((X - 1 c^T) D)^T (g * r)."""
        u = self.g * r
        return np.asarray(self.X.T @ u).ravel() - self.c * float(u.sum())

    def submatrix(self, cols):
        Xs = self.X[:, cols]
        if sp.issparse(Xs) and Xs.shape[0] * Xs.shape[1] <= _DENSE_SUBPROBLEM_ENTRIES:
            Xs = Xs.toarray()
        sub = _Centered.__new__(_Centered)
        sub.X = Xs
        sub.g = self.g
        sub.gsum = self.gsum
        sub.c = self.c[cols]
        return sub

    def centered_col_norms_sq(self) -> np.ndarray:
        """Weighted squared norms of the centered columns."""
        if sp.issparse(self.X):
            sq = np.asarray(self.X.multiply(self.X).T @ self.g).ravel()
        else:
            sq = (self.X * self.X).T @ self.g
        return np.maximum(sq - self.gsum * self.c * self.c, 0.0)

    def lipschitz(self, n_power_iter=20, safety=1.1):
        """Power-iteration bound on 2 * sigma_max of the centered curvature."""
        m = self.c.shape[0]
        if m == 0:
            return 1.0
        rng = np.random.default_rng(12345)
        v = rng.standard_normal(m)
        v /= np.linalg.norm(v)
        est = 0.0
        for _ in range(n_power_iter):
            w = 2.0 * self.rmatvec_weighted(self.matvec(v))
            est = float(np.linalg.norm(w))
            if est <= 0:
                return 1.0
            v = w / est
        return max(est * safety, 1e-12)


def _inner_fista(cent, ytil, starts, sizes, lam_vec, unit_scale, x0, tol_abs, max_iter, history):
    """Monotone FISTA on the scaled subproblem until the original-coordinate
    KKT defect (scaled terms divided by ``unit_scale``) drops below tol_abs."""
    L = cent.lipschitz()
    x = x0.copy()
    rx = ytil - cent.matvec(x)
    Fx = float(np.sum(cent.g * rx * rx)) + float(lam_vec @ _group_norms(x, starts))
    v, rv, t = x, rx, 1.0
    it = 0
    while it < max_iter:
        it += 1
        grad_v = -2.0 * cent.rmatvec_weighted(rv)
        z = _prox_groups(v - grad_v / L, starts, sizes, lam_vec / L)
        rz = ytil - cent.matvec(z)
        Fz = float(np.sum(cent.g * rz * rz)) + float(lam_vec @ _group_norms(z, starts))
        if Fz > Fx + 1e-12 * (1.0 + abs(Fx)):
            # restart from the last accepted point; plain step must descend
            grad_x = -2.0 * cent.rmatvec_weighted(rx)
            for _ in range(60):
                z = _prox_groups(x - grad_x / L, starts, sizes, lam_vec / L)
                rz = ytil - cent.matvec(z)
                Fz = float(np.sum(cent.g * rz * rz)) + float(lam_vec @ _group_norms(z, starts))
                if Fz <= Fx + 1e-12 * (1.0 + abs(Fx)):
                    break
                L *= 2.0
            t = 1.0
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        mom = (t - 1.0) / t_next
        v = z + mom * (z - x)
        rv = rz + mom * (rz - rx)
        x, rx, Fx, t = z, rz, Fz, t_next
        if history is not None:
            history.append(Fx)
        if it % _INNER_CHECK_EVERY == 0 or it == max_iter:
            grad_x = -2.0 * cent.rmatvec_weighted(rx)
            terms = _kkt_group_terms(grad_x, x, starts, lam_vec) / unit_scale
            if terms.max(initial=0.0) <= tol_abs:
                break
    return x, rx, it


def fit_path(
    design,
    y,
    g=None,
    grid: Sequence[float] | None = None,
    *,
    n_lambda: int = 50,
    lambda_min_ratio: float = 1e-3,
    tol: float = 1e-7,
    max_iter: int = 100_000,
    record_history: bool = False,
) -> PathResult:
    """Solve the group lasso along a descending penalty grid with warm starts.

    Parameters
    ----------
    design : object with ``matrix`` and ``group_starts``
        Grouped design; columns of one group must be contiguous.
    y, g : arrays
        Outcomes and optional nonnegative weights (default 1).
    grid : sequence of float, optional
        Descending penalties. Default: ``n_lambda`` geometric points from
        lambda_max down to ``lambda_min_ratio * lambda_max``.
    tol : float
        KKT tolerance relative to lambda_max.
    max_iter : int
        Inner iteration budget per grid point; exceeding it flags the point
        as not converged instead of raising.

    Returns
    -------
    PathResult
    """
    X = _as_matrix(design)
    y = np.asarray(y, dtype=float)
    g = _weights_or_ones(y, g)
    if np.isnan(y).any():
        raise ValueError("NaN in outcomes")
    data_vals = X.data if sp.issparse(X) else X
    if np.isnan(data_vals).any():
        raise ValueError("NaN in design matrix")
    starts = np.asarray(design.group_starts, dtype=np.int64)
    sizes = np.diff(starts)
    m = int(starts[-1])

    gsum = float(g.sum())
    ybar = float(np.sum(g * y) / gsum)
    ytil = y - ybar

    # normalize column blocks (one factor per group) for better conditioning;
    # the penalty is reweighted per group so the problem is unchanged
    base = _Centered(X, g)
    grp_ms = np.add.reduceat(base.centered_col_norms_sq(), starts[:-1]) / sizes if m else np.zeros(0)
    scale_g = np.where(grp_ms > 1e-24, 1.0 / np.sqrt(np.where(grp_ms > 0, grp_ms, 1.0)), 1.0)
    scale_col = np.repeat(scale_g, sizes)
    cent = _Centered(X, g, scale_col)

    beta_s = np.zeros(m)  # scaled coordinates: beta = scale_col * beta_s
    r = ytil - cent.matvec(beta_s)
    grad_norms = _group_norms(-2.0 * cent.rmatvec_weighted(r), starts) / scale_g
    lam_max = float(grad_norms.max()) if m else 0.0
    if grid is None:
        if lam_max <= 0:
            grid_arr = np.array([0.0])
        else:
            grid_arr = lam_max * lambda_min_ratio ** (np.arange(n_lambda) / max(n_lambda - 1, 1))
    else:
        grid_arr = np.asarray(list(grid), dtype=float)
        if grid_arr.size == 0:
            raise ValueError("empty lambda grid")
        if (np.diff(grid_arr) >= 0).any():
            raise ValueError("lambda grid must be strictly decreasing")
        if (grid_arr < 0).any():
            raise ValueError("lambda grid must be nonnegative")
    tol_abs = tol * (lam_max if lam_max > 0 else 1.0)
    prev_lam = lam_max

    states = []
    objectives = np.empty(grid_arr.size)
    residuals = np.empty(grid_arr.size)
    iter_counts = np.zeros(grid_arr.size, dtype=np.int64)
    converged = np.ones(grid_arr.size, dtype=bool)
    histories: list[np.ndarray] = []

    for j, lam in enumerate(grid_arr):
        hist: list[float] | None = [] if record_history else None
        lam_vec = lam * scale_g
        # screening: start from the warm-start support and admit the worst
        # KKT violators in geometrically growing batches; the final full pass
        # below certifies optimality over every group
        working = _group_norms(beta_s, starts) > 0
        strong = grad_norms >= max(2.0 * lam - prev_lam, 0.0)
        if 0 < strong.sum() <= max(2 * working.sum(), 32):
            working |= strong
        budget = max_iter
        ok = False
        for _pass in range(_MAX_WORKING_SET_PASSES):
            if working.any():
                gidx = np.flatnonzero(working)
                cols, sub_starts, sub_sizes = _working_columns(working, starts, sizes)
                sub = cent.submatrix(cols)
                x, _, used = _inner_fista(
                    sub, ytil, sub_starts, sub_sizes, lam_vec[gidx], scale_g[gidx],
                    beta_s[cols], 0.5 * tol_abs, budget, hist,
                )
                budget -= used
                iter_counts[j] += used
                beta_s = np.zeros(m)
                beta_s[cols] = x
            r = ytil - cent.matvec(beta_s)
            grad = -2.0 * cent.rmatvec_weighted(r)
            grad_norms = _group_norms(grad, starts) / scale_g
            terms = _kkt_group_terms(grad, beta_s, starts, lam_vec) / scale_g
            resid_now = float(terms.max(initial=0.0)) + 2.0 * abs(float(np.sum(g * r)))
            violations = (~working) & (terms > tol_abs)
            n_viol = int(violations.sum())
            if n_viol == 0:
                ok = resid_now <= tol_abs
                break
            allow = max(16, 2 * int(working.sum()))
            if n_viol > allow:
                cut = np.partition(terms[violations], n_viol - allow)[n_viol - allow]
                violations &= terms >= cut
            working |= violations
            if budget <= 0:
                break
        converged[j] = ok
        b0 = ybar - float(cent.c @ beta_s)
        state = CoefficientState(
            intercept=b0, beta=scale_col * beta_s, group_starts=starts
        )
        states.append(state)
        pen = float(lam_vec @ _group_norms(beta_s, starts))
        objectives[j] = float(np.sum(g * r * r)) + pen
        residuals[j] = resid_now
        prev_lam = lam
        if record_history:
            histories.append(np.asarray(hist))

    return PathResult(
        lambda_grid=grid_arr,
        states=tuple(states),
        objectives=objectives,
        kkt_residuals=residuals,
        iterations=iter_counts,
        converged=converged,
        history=tuple(histories) if record_history else None,
    )


def _working_columns(working, starts, sizes):
    gidx = np.flatnonzero(working)
    cols = np.concatenate([np.arange(starts[p], starts[p + 1]) for p in gidx])
    sub_sizes = sizes[gidx]
    sub_starts = np.concatenate([[0], np.cumsum(sub_sizes)])
    return cols, sub_starts, sub_sizes
