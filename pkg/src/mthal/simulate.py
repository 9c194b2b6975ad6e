"""Simulation families and the Monte-Carlo benchmark harness.

Setups are labeled by family, sparsity level and sharing pattern: "N" for
nonlinear, "L" for linear, "HN" for high-dimensional nonlinear; "H" for high
sparsity (60% zero coefficients) vs "L" for low (20%); "S" for the same
sparsity level on every task vs "D" for per-task levels drawn from a
deviation range (40-80% high, 5-40% low). So "NHS" is the nonlinear,
high-sparsity, shared setup.

The generator fixes details the benchmark description leaves open, and they
are deterministic given the seeds:

* covariate types by index: the first covariate is binary (Bernoulli 1/2),
  the second categorical with 3 uniform levels, the rest standard normal;
* the true support of a task with sparsity level s is the first
  ceil((1-s)*d) covariates (nonzero coefficients lead, zeros trail);
* nonlinear signal: each support covariate j contributes
  coef * t(x_j) with the transform t picked by index as j mod library size,
  library [log(1+|x|), cos(x), x^2] (exp(x) appended in the high-dimensional
  family), plus products of consecutive support pairs; the linear family uses
  identity transforms and includes the pair products only at low sparsity;
* all coefficients are drawn per task from a standard normal;
* y = signal + noise_coef * eps with eps ~ N(0, noise_sd^2).

Sub-seeds derive from a SeedSequence spawned off (config seed, replicate
index): one child each for coefficients, training draws and test draws, each
split again per task. Replicates are therefore independent and can run in
parallel in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed

from .data import StackedDataset, TaskDataset, stack
from .estimator import BaselineConfig, MtHalConfig, fit_baseline, fit_mthal
from .metrics import compare_support, mse

FAMILIES = ("nonlinear", "linear", "highdim-nonlinear")
SPARSITY_FRACTION = {"high": 0.6, "low": 0.2}
SPARSITY_RANGE = {"high": (0.40, 0.80), "low": (0.05, 0.40)}
_FAMILY_LETTER = {"nonlinear": "N", "linear": "L", "highdim-nonlinear": "HN"}

METHOD_DISPLAY = {"mt-hal": "MT-HAL", "mt-lasso": "MT-lasso", "mt-l21": "MT-L21"}


@dataclass(frozen=True)
class DgpConfig:
    """One simulation setup."""

    family: str = "nonlinear"
    sparsity: str = "high"
    sharing: str = "same"
    d: int | None = None
    n_per_task: tuple[int, ...] = (100, 100, 150, 150, 100)
    n_test_per_task: int = 400
    noise_sd: float = 0.1
    noise_coef: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.sparsity not in SPARSITY_FRACTION:
            raise ValueError(f"unknown sparsity {self.sparsity!r}")
        if self.sharing not in ("same", "different"):
            raise ValueError(f"unknown sharing {self.sharing!r}")
        object.__setattr__(self, "n_per_task", tuple(int(n) for n in self.n_per_task))
        if any(n < 1 for n in self.n_per_task):
            raise ValueError("every task needs at least one sample")

    @property
    def n_tasks(self) -> int:
        return len(self.n_per_task)

    @property
    def n_covariates(self) -> int:
        if self.d is not None:
            return self.d
        return 20 if self.family == "highdim-nonlinear" else 6

    @property
    def label(self) -> str:
        return (
            _FAMILY_LETTER[self.family]
            + ("H" if self.sparsity == "high" else "L")
            + ("S" if self.sharing == "same" else "D")
        )


_TRANSFORMS = (
    lambda x: np.log1p(np.abs(x)),
    np.cos,
    np.square,
    np.exp,
)


@dataclass(frozen=True)
class TaskTruth:
    """True regression function of one task."""

    support: tuple[int, ...]
    coefs: np.ndarray
    transforms: tuple[int, ...]  # index into _TRANSFORMS, -1 for identity
    pairs: tuple[tuple[int, int], ...]
    pair_coefs: np.ndarray

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        signal = np.zeros(X.shape[0])
        for j, c, t in zip(self.support, self.coefs, self.transforms):
            col = X[:, j]
            signal += c * (col if t < 0 else _TRANSFORMS[t](col))
        for (a, b), c in zip(self.pairs, self.pair_coefs):
            signal += c * X[:, a] * X[:, b]
        return signal


@dataclass(frozen=True)
class SimReplicate:
    """One replicate: train tasks, independent test tasks, and the truth."""

    config: DgpConfig
    train: tuple[TaskDataset, ...]
    test: tuple[TaskDataset, ...]
    truths: dict[int, TaskTruth]

    def true_support(self) -> dict[int, set[str]]:
        out: dict[int, set[str]] = {}
        for tid, truth in self.truths.items():
            covs = set(truth.support)
            for a, b in truth.pairs:
                covs |= {a, b}
            out[tid] = {f"x{j + 1}" for j in covs}
        return out

    def truth(self, rows: StackedDataset) -> np.ndarray:
        """True signal for stacked rows (covariates matched by name order)."""
        out = np.empty(rows.n)
        order = [rows.covariate_names.index(f"x{j + 1}") for j in range(len(rows.covariate_names))]
        X = rows.covariates[:, order]
        for tid in rows.task_ids:
            idx = rows.task_rows(tid)
            out[idx] = self.truths[int(tid)].evaluate(X[idx])
        return out

    def oracle(self):
        """Predictor that returns the true signal (noise-free)."""

        class _Oracle:
            def __init__(self, rep):
                self.rep = rep

            def predict(self, rows):
                return self.rep.truth(rows if isinstance(rows, StackedDataset) else stack(rows))

        return _Oracle(self)


def _draw_covariates(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    X = np.empty((n, d))
    for j in range(d):
        if j == 0:
            X[:, j] = rng.integers(0, 2, size=n).astype(float)
        elif j == 1:
            X[:, j] = rng.integers(0, 3, size=n).astype(float)
        else:
            X[:, j] = rng.standard_normal(n)
    return X


def _task_truth(cfg: DgpConfig, rng: np.random.Generator) -> TaskTruth:
    d = cfg.n_covariates
    if cfg.sharing == "same":
        s = SPARSITY_FRACTION[cfg.sparsity]
    else:
        lo, hi = SPARSITY_RANGE[cfg.sparsity]
        s = float(rng.uniform(lo, hi))
    m = math.ceil((1.0 - s) * d)
    if m < 1:
        raise ValueError(f"sparsity level {s} leaves an empty support")
    support = tuple(range(m))

    nonlinear = cfg.family in ("nonlinear", "highdim-nonlinear")
    library = 4 if cfg.family == "highdim-nonlinear" else 3
    transforms = tuple(j % library if nonlinear else -1 for j in support)
    coefs = rng.standard_normal(m)

    include_pairs = nonlinear or cfg.sparsity == "low"
    pairs = tuple((support[i], support[i + 1]) for i in range(0, m - 1, 2)) if include_pairs else ()
    pair_coefs = rng.standard_normal(len(pairs))
    return TaskTruth(
        support=support, coefs=coefs, transforms=transforms, pairs=pairs, pair_coefs=pair_coefs
    )


def gen_replicate(cfg: DgpConfig, rep_seed: int) -> SimReplicate:
    """Generate one replicate; bit-identical for identical (config, rep_seed)."""
    root = np.random.SeedSequence(entropy=(cfg.seed, rep_seed))
    coef_seq, train_seq, test_seq = root.spawn(3)
    K, d = cfg.n_tasks, cfg.n_covariates
    names = tuple(f"x{j + 1}" for j in range(d))

    truths = {
        k + 1: _task_truth(cfg, np.random.default_rng(s))
        for k, s in enumerate(coef_seq.spawn(K))
    }

    def draw_tasks(seqs, sizes):
        tasks = []
        for k, (s, n) in enumerate(zip(seqs, sizes)):
            rng = np.random.default_rng(s)
            X = _draw_covariates(rng, n, d)
            eps = rng.normal(0.0, cfg.noise_sd, size=n)
            y = truths[k + 1].evaluate(X) + cfg.noise_coef * eps
            tasks.append(TaskDataset(task_id=k + 1, covariates=X, outcomes=y, covariate_names=names))
        return tuple(tasks)

    train = draw_tasks(train_seq.spawn(K), cfg.n_per_task)
    test = draw_tasks(test_seq.spawn(K), [cfg.n_test_per_task] * K)
    return SimReplicate(config=cfg, train=train, test=test, truths=truths)


@dataclass(frozen=True)
class SimReportRow:
    setup: str
    method: str
    mean_mse: float
    se_mse: float
    mean_precision: float
    se_precision: float
    mean_accuracy: float
    se_accuracy: float
    reps_used: int
    failures: int


@dataclass(frozen=True)
class SimReport:
    rows: tuple[SimReportRow, ...]
    reps: int

    def row(self, method: str) -> SimReportRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_text(self) -> str:
        cols = (
            "setup\tmethod\tmse\tmse_se\tprecision\tprecision_se"
            "\taccuracy\taccuracy_se\treps_used\tfailures"
        )
        lines = [cols]
        for r in self.rows:
            lines.append(
                f"{r.setup}\t{r.method}\t{r.mean_mse!r}\t{r.se_mse!r}"
                f"\t{r.mean_precision!r}\t{r.se_precision!r}"
                f"\t{r.mean_accuracy!r}\t{r.se_accuracy!r}\t{r.reps_used}\t{r.failures}"
            )
        return "\n".join(lines)

    def format_table(self) -> str:
        """Benchmark-style table: Setup, Method, MSE, Prec %, Accu %."""
        lines = [f"{'Setup':<6} {'Method':<9} {'MSE':>8} {'Prec %':>7} {'Accu %':>7}"]
        for r in self.rows:
            name = METHOD_DISPLAY.get(r.method, r.method)
            lines.append(
                f"{r.setup:<6} {name:<9} {r.mean_mse:>8.3f} "
                f"{r.mean_precision:>7.1f} {r.mean_accuracy:>7.1f}"
            )
        return "\n".join(lines)


def _fit_builtin(name: str, train, seed: int, settings: dict):
    if name == "mt-hal":
        cfg = MtHalConfig(seed=seed, **settings)
        model = fit_mthal(train, cfg)
    elif name in ("mt-lasso", "mt-l21"):
        cfg = BaselineConfig(seed=seed, **settings)
        model = fit_baseline(name, train, cfg)
    else:
        raise ValueError(f"unknown method {name!r}")
    return model.predict, model.support()


def _run_replicate(cfg, methods, method_settings, r):
    rep = gen_replicate(cfg, r)
    test = stack(rep.test)
    truth_support = rep.true_support()
    out = {}
    for entry in methods:
        if isinstance(entry, str):
            name, fitter = entry, None
        else:
            name, fitter = entry
        try:
            if fitter is None:
                pred_fn, support = _fit_builtin(name, rep.train, r, method_settings.get(name, {}))
            else:
                pred_fn, support = fitter(rep.train, r)
            pred = pred_fn(test)
            cmp = compare_support(support, truth_support)
            out[name] = (mse(pred, test.outcomes), cmp.precision, cmp.accuracy)
        except Exception as exc:  # noqa: BLE001 - failures are reported, not fatal
            out[name] = ("failed", repr(exc))
    return out


def run_mc(
    cfg: DgpConfig,
    methods: Sequence,
    reps: int,
    *,
    n_jobs: int = 1,
    method_settings: dict[str, dict] | None = None,
) -> SimReport:
    """Monte-Carlo comparison of methods on independent replicates.

    ``methods`` entries are builtin names ("mt-hal", "mt-lasso", "mt-l21") or
    ``(name, fitter)`` pairs where ``fitter(train_tasks, seed)`` returns
    ``(predict_fn, support_dict)``. Failed fits are counted and excluded from
    the aggregates rather than silently dropped. Aggregation is independent
    of execution order, so replicates may run in parallel.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    method_settings = method_settings or {}
    per_rep = Parallel(n_jobs=n_jobs)(
        delayed(_run_replicate)(cfg, list(methods), method_settings, r) for r in range(reps)
    )

    rows = []
    for entry in methods:
        name = entry if isinstance(entry, str) else entry[0]
        vals = [res[name] for res in per_rep]
        good = np.array([v for v in vals if v[0] != "failed"], dtype=float)
        failures = len(vals) - good.shape[0]
        if good.shape[0] == 0:
            rows.append(SimReportRow(cfg.label, name, math.nan, math.nan, math.nan,
                                     math.nan, math.nan, math.nan, 0, failures))
            continue

        def agg(col):
            mean = float(good[:, col].mean())
            se = float(good[:, col].std(ddof=1) / math.sqrt(good.shape[0])) if good.shape[0] > 1 else 0.0
            return mean, se

        m, m_se = agg(0)
        p, p_se = agg(1)
        a, a_se = agg(2)
        rows.append(SimReportRow(cfg.label, name, m, m_se, p, p_se, a, a_se, good.shape[0], failures))
    return SimReport(rows=tuple(rows), reps=reps)
