"""CSV ingestion, the Parkinson's telemonitoring adapter, and the CLI.

Subcommands: ``fit`` (train a model, write a model archive and optionally the
CV risk table), ``predict`` (apply a saved model to new rows), ``simulate``
(Monte-Carlo benchmark table) and ``evaluate`` (honest V-fold CV comparison
of the estimators on a dataset). Settings come from an INI config file, with
command-line flags taking precedence. Output files are written atomically: a
failed run leaves no truncated file at the target path.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import os
import sys
import tempfile
import warnings
from dataclasses import dataclass

import numpy as np

from .cv import make_folds
from .data import TaskDataset, stack
from .estimator import (
    BASELINE_KINDS,
    BaselineConfig,
    MtHalConfig,
    fit_baseline,
    fit_mthal,
    load_model,
    save_model,
    _atomic_write_bytes,
)
from .metrics import mse
from .simulate import DgpConfig, run_mc


class UsageError(Exception):
    """Bad command line or config file."""


class DataError(Exception):
    """Unreadable or malformed data."""


class NumericalError(Exception):
    """Numerical failure during fitting."""


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for generic CSV ingestion."""

    task_column: str | None = "task"
    outcome_column: str = "y"
    weight_column: str | None = None
    cluster_column: str | None = None
    covariate_columns: tuple[str, ...] | None = None
    task_id: int = 1  # used when task_column is None (one file per task)
    require_outcome: bool = True


def _read_rows(path: str) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty file")
    header, data = rows[0], rows[1:]
    if not data:
        raise DataError(f"{path}: no data rows")
    width = len(header)
    for i, row in enumerate(data, start=1):
        if len(row) != width:
            raise DataError(f"{path}: row {i} has {len(row)} fields, expected {width}")
    return header, data


def _parse_column(path, data, col_idx, name, conv, kind):
    out = []
    for i, row in enumerate(data, start=1):
        try:
            out.append(conv(row[col_idx]))
        except ValueError:
            raise DataError(
                f"{path}: unparseable {kind} at row {i}, column {name!r}: {row[col_idx]!r}"
            ) from None
    return out


def load_csv(path: str, schema: CsvSchema) -> list[TaskDataset]:
    """Load a CSV into per-task datasets.

    Rows are partitioned by the task column (ascending task id); without a
    task column the whole file is one task. Non-numeric covariate columns are
    one-hot encoded with columns named ``column=level`` (levels sorted).
    """
    header, data = _read_rows(path)
    pos = {name: j for j, name in enumerate(header)}

    special = [schema.outcome_column]
    for col in (schema.task_column, schema.weight_column, schema.cluster_column):
        if col is not None:
            special.append(col)
    for col in special:
        if col == schema.outcome_column and not schema.require_outcome:
            continue
        if col not in pos:
            raise DataError(f"{path}: missing column {col!r} (header: {header})")

    if schema.require_outcome or schema.outcome_column in pos:
        y = np.array(_parse_column(path, data, pos[schema.outcome_column], schema.outcome_column, float, "number"))
    else:
        y = np.zeros(len(data))
    if schema.task_column is not None:
        task_vals = np.array(
            _parse_column(path, data, pos[schema.task_column], schema.task_column, int, "task id")
        )
    else:
        task_vals = np.full(len(data), schema.task_id)
    weights = None
    if schema.weight_column is not None:
        weights = np.array(
            _parse_column(path, data, pos[schema.weight_column], schema.weight_column, float, "number")
        )
    clusters = None
    if schema.cluster_column is not None:
        clusters = np.array(
            _parse_column(path, data, pos[schema.cluster_column], schema.cluster_column, int, "cluster id")
        )

    if schema.covariate_columns is not None:
        cov_cols = list(schema.covariate_columns)
        for col in cov_cols:
            if col not in pos:
                raise DataError(f"{path}: missing covariate column {col!r}")
    else:
        cov_cols = [c for c in header if c not in special]

    cov_parts: list[np.ndarray] = []
    cov_names: list[str] = []
    for col in cov_cols:
        raw = [row[pos[col]] for row in data]
        try:
            vals = np.array([float(v) for v in raw])
            cov_parts.append(vals[:, None])
            cov_names.append(col)
        except ValueError:
            levels = sorted(set(raw))
            onehot = np.zeros((len(raw), len(levels)))
            level_idx = {lv: k for k, lv in enumerate(levels)}
            for i, v in enumerate(raw):
                onehot[i, level_idx[v]] = 1.0
            cov_parts.append(onehot)
            cov_names.extend(f"{col}={lv}" for lv in levels)
    X = np.hstack(cov_parts) if cov_parts else np.zeros((len(data), 0))

    tasks = []
    for tid in sorted(set(int(t) for t in task_vals)):
        rows = np.flatnonzero(task_vals == tid)
        tasks.append(
            TaskDataset(
                task_id=tid,
                covariates=X[rows],
                outcomes=y[rows],
                weights=None if weights is None else weights[rows],
                cluster_ids=None if clusters is None else clusters[rows],
                covariate_names=tuple(cov_names),
            )
        )
    return tasks


PARKINSONS_ROWS = 5875
PARKINSONS_COLUMNS = 22
PARKINSONS_TASKS = {1: "motor_UPDRS", 2: "total_UPDRS"}


def load_parkinsons(path: str) -> list[TaskDataset]:
    """Load the UCI Parkinson's telemonitoring CSV as a two-task problem.

    Task 1 predicts motor UPDRS and task 2 total UPDRS from the same rows of
    19 covariates (subject id, age, sex, sixteen voice measures); the subject
    id doubles as the cluster label for clustered CV. ``test_time`` is not a
    covariate.
    """
    header, data = _read_rows(path)
    if len(header) != PARKINSONS_COLUMNS:
        raise DataError(
            f"{path}: expected {PARKINSONS_COLUMNS} columns of the telemonitoring layout, got {len(header)}"
        )
    if len(data) != PARKINSONS_ROWS:
        warnings.warn(f"{path}: expected {PARKINSONS_ROWS} rows, got {len(data)}", stacklevel=2)
    pos = {name.strip(): j for j, name in enumerate(header)}
    subject_col = next((c for c in pos if c.lower().startswith("subject")), None)
    required = [subject_col, "age", "sex", "test_time", "motor_UPDRS", "total_UPDRS"]
    if subject_col is None or any(c not in pos for c in required[1:]):
        raise DataError(f"{path}: telemonitoring layout columns not found in header {header}")
    voice = [c for c in (name.strip() for name in header) if c not in required]
    if len(voice) != 16:
        raise DataError(f"{path}: expected 16 voice measures, found {len(voice)}")

    subject = np.array(_parse_column(path, data, pos[subject_col], subject_col, lambda v: int(float(v)), "subject id"))
    cov_names = ["subject", "age", "sex", *voice]
    cols = [subject.astype(float)]
    for name in cov_names[1:]:
        cols.append(np.array(_parse_column(path, data, pos[name], name, float, "number")))
    X = np.column_stack(cols)

    tasks = []
    for tid, outcome_col in PARKINSONS_TASKS.items():
        y = np.array(_parse_column(path, data, pos[outcome_col], outcome_col, float, "number"))
        tasks.append(
            TaskDataset(
                task_id=tid,
                covariates=X,
                outcomes=y,
                cluster_ids=subject,
                covariate_names=tuple(cov_names),
            )
        )
    return tasks


def write_predictions_csv(path: str, task_ids: np.ndarray, predictions: np.ndarray) -> None:
    lines = ["row,task,prediction"]
    for i, (t, p) in enumerate(zip(task_ids, predictions), start=1):
        lines.append(f"{i},{int(t)},{p!r}")
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def write_text(path: str, text: str) -> None:
    _atomic_write_bytes(path, (text.rstrip("\n") + "\n").encode())


_CONFIG_SECTIONS = ("data", "basis", "solver", "cv", "simulate", "output")


def read_config_file(path: str) -> dict[str, str]:
    """Flat ``section.key -> value`` map from an INI config file."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise UsageError(f"bad config file {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in _CONFIG_SECTIONS:
            raise UsageError(f"unknown config section [{section}] in {path}")
        for key, value in parser.items(section):
            out[f"{section}.{key}"] = value
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="mthal", description="Multi-task Highly Adaptive Lasso")
    sub = p.add_subparsers(dest="command", required=True)

    def add_data_flags(sp, outcome_required=True):
        sp.add_argument("--data", action="append", required=True, help="CSV path (repeat for one file per task)")
        sp.add_argument("--format", choices=("generic", "parkinsons"), default=None)
        sp.add_argument("--task-col", default=None)
        sp.add_argument("--outcome-col", default=None)
        sp.add_argument("--weight-col", default=None)
        sp.add_argument("--cluster-col", default=None)

    def add_fit_flags(sp):
        sp.add_argument("--config", default=None, help="INI config file; flags override")
        sp.add_argument("--method", default=None, help="mt-hal (default), mt-lasso or mt-l21")
        sp.add_argument("--max-degree", type=int, default=None)
        sp.add_argument("--knots", type=int, default=None, help="per-covariate knot cap")
        sp.add_argument("--no-task-interaction", action="store_true")
        sp.add_argument("--column-budget", type=int, default=None)
        sp.add_argument("--n-lambda", type=int, default=None)
        sp.add_argument("--lambda-min-ratio", type=float, default=None)
        sp.add_argument("--tol", type=float, default=None)
        sp.add_argument("--max-iter", type=int, default=None)
        sp.add_argument("--folds", type=int, default=None)
        sp.add_argument("--scheme", choices=("task-balanced", "clustered"), default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--standardize", action="store_true")
        sp.add_argument("--n-jobs", type=int, default=None)

    fit = sub.add_parser("fit", help="fit a model and save the archive")
    add_data_flags(fit)
    add_fit_flags(fit)
    fit.add_argument("--out", required=True, help="model archive path")
    fit.add_argument("--risk-table", default=None, help="optional CV risk table output")

    pred = sub.add_parser("predict", help="predict with a saved model")
    add_data_flags(pred, outcome_required=False)
    pred.add_argument("--model", required=True)
    pred.add_argument("--out", required=True)
    pred.add_argument("--config", default=None)

    sim = sub.add_parser("simulate", help="run a Monte-Carlo benchmark")
    sim.add_argument("--config", default=None)
    sim.add_argument("--family", choices=("nonlinear", "linear", "highdim-nonlinear"), default=None)
    sim.add_argument("--sparsity", choices=("high", "low"), default=None)
    sim.add_argument("--sharing", choices=("same", "different"), default=None)
    sim.add_argument("--d", type=int, default=None)
    sim.add_argument("--n-per-task", default=None, help="comma-separated sizes")
    sim.add_argument("--n-test-per-task", type=int, default=None)
    sim.add_argument("--noise-sd", type=float, default=None)
    sim.add_argument("--noise-coef", type=float, default=None)
    sim.add_argument("--reps", type=int, default=None)
    sim.add_argument("--methods", default=None, help="comma-separated method names")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--n-jobs", type=int, default=None)
    sim.add_argument("--max-degree", type=int, default=None)
    sim.add_argument("--knots", type=int, default=None)
    sim.add_argument("--folds", type=int, default=None)
    sim.add_argument("--out", required=True)

    ev = sub.add_parser("evaluate", help="honest V-fold CV comparison on a dataset")
    add_data_flags(ev)
    add_fit_flags(ev)
    ev.add_argument("--methods", default=None, help="comma-separated method names")
    ev.add_argument("--out", required=True)
    return p


def _merged(args, file_cfg: dict[str, str], section: str, key: str, cast, default):
    cli_val = getattr(args, key.replace("-", "_"), None)
    if cli_val is not None and cli_val is not False:
        return cli_val
    file_val = file_cfg.get(f"{section}.{key.replace('-', '_')}")
    if file_val is not None:
        try:
            if cast is bool:
                return file_val.strip().lower() in ("1", "true", "yes", "on")
            return cast(file_val)
        except ValueError as exc:
            raise UsageError(f"bad config value {section}.{key} = {file_val!r}") from exc
    return default


def _load_tasks(args, file_cfg) -> list[TaskDataset]:
    fmt = _merged(args, file_cfg, "data", "format", str, "generic")
    paths = args.data
    if fmt == "parkinsons":
        if len(paths) != 1:
            raise UsageError("parkinsons format takes exactly one data file")
        return load_parkinsons(paths[0])
    schema_base = dict(
        outcome_column=_merged(args, file_cfg, "data", "outcome-col", str, "y"),
        weight_column=_merged(args, file_cfg, "data", "weight-col", str, None),
        cluster_column=_merged(args, file_cfg, "data", "cluster-col", str, None),
        require_outcome=getattr(args, "command", "") != "predict",
    )
    if len(paths) == 1:
        schema = CsvSchema(task_column=_merged(args, file_cfg, "data", "task-col", str, "task"), **schema_base)
        return load_csv(paths[0], schema)
    tasks = []
    for k, path in enumerate(paths, start=1):
        schema = CsvSchema(task_column=None, task_id=k, **schema_base)
        tasks.extend(load_csv(path, schema))
    return tasks


def _fit_config_kwargs(args, file_cfg) -> dict:
    return dict(
        n_lambda=_merged(args, file_cfg, "solver", "n-lambda", int, 50),
        lambda_min_ratio=_merged(args, file_cfg, "solver", "lambda-min-ratio", float, 1e-3),
        tol=_merged(args, file_cfg, "solver", "tol", float, 1e-7),
        max_iter=_merged(args, file_cfg, "solver", "max-iter", int, 100_000),
        cv_folds=_merged(args, file_cfg, "cv", "folds", int, 5),
        cv_scheme=_merged(args, file_cfg, "cv", "scheme", str, "task-balanced"),
        seed=_merged(args, file_cfg, "cv", "seed", int, 0),
        n_jobs=_merged(args, file_cfg, "solver", "n-jobs", int, 1),
    )


def _hal_config(args, file_cfg) -> MtHalConfig:
    kwargs = _fit_config_kwargs(args, file_cfg)
    task_interaction = not getattr(args, "no_task_interaction", False)
    if f"basis.task_interaction" in file_cfg and not getattr(args, "no_task_interaction", False):
        task_interaction = file_cfg["basis.task_interaction"].strip().lower() in ("1", "true", "yes", "on")
    return MtHalConfig(
        max_degree=_merged(args, file_cfg, "basis", "max-degree", int, None),
        per_covariate_max=_merged(args, file_cfg, "basis", "knots", int, 50),
        task_interaction=task_interaction,
        column_budget=_merged(args, file_cfg, "basis", "column-budget", int, MtHalConfig.column_budget),
        standardize=bool(_merged(args, file_cfg, "basis", "standardize", bool, False)),
        **kwargs,
    )


def _validate_common(cfg) -> None:
    if cfg.tol <= 0:
        raise UsageError("tol must be positive")
    if cfg.cv_folds < 2:
        raise UsageError("folds must be >= 2")
    if not (0 < cfg.lambda_min_ratio < 1):
        raise UsageError("lambda-min-ratio must be in (0, 1)")
    if cfg.n_lambda < 1:
        raise UsageError("n-lambda must be >= 1")


def _cmd_fit(args) -> int:
    file_cfg = read_config_file(args.config) if args.config else {}
    tasks = _load_tasks(args, file_cfg)
    method = _merged(args, file_cfg, "solver", "method", str, "mt-hal")
    if method == "mt-hal":
        cfg = _hal_config(args, file_cfg)
        _validate_common(cfg)
        model = fit_mthal(tasks, cfg)
    elif method in BASELINE_KINDS:
        kwargs = _fit_config_kwargs(args, file_cfg)
        cfg = BaselineConfig(**kwargs)
        _validate_common(cfg)
        model = fit_baseline(method, tasks, cfg)
    else:
        raise UsageError(f"unknown method {method!r}")
    save_model(model, args.out)
    if args.risk_table:
        write_text(args.risk_table, model.cv_table.to_text())
    print(f"fitted {method} on {len(tasks)} task(s); lambda_n={model.lambda_n:.6g}; model -> {args.out}")
    return 0


def _cmd_predict(args) -> int:
    file_cfg = read_config_file(args.config) if args.config else {}
    model = load_model(args.model)
    tasks = _load_tasks(args, file_cfg)
    data = stack(tasks)
    preds = model.predict(data)
    write_predictions_csv(args.out, data.task_membership, preds)
    print(f"wrote {preds.size} predictions -> {args.out}")
    return 0


def _parse_methods(spec: str | None) -> list[str]:
    if not spec:
        return ["mt-hal", "mt-lasso", "mt-l21"]
    methods = [m.strip() for m in spec.split(",") if m.strip()]
    for m in methods:
        if m not in ("mt-hal", *BASELINE_KINDS):
            raise UsageError(f"unknown method {m!r}")
    return methods


def _cmd_simulate(args) -> int:
    file_cfg = read_config_file(args.config) if args.config else {}
    n_per_task = _merged(args, file_cfg, "simulate", "n-per-task", str, None)
    dgp_kwargs = dict(
        family=_merged(args, file_cfg, "simulate", "family", str, "nonlinear"),
        sparsity=_merged(args, file_cfg, "simulate", "sparsity", str, "high"),
        sharing=_merged(args, file_cfg, "simulate", "sharing", str, "same"),
        d=_merged(args, file_cfg, "simulate", "d", int, None),
        n_test_per_task=_merged(args, file_cfg, "simulate", "n-test-per-task", int, 400),
        noise_sd=_merged(args, file_cfg, "simulate", "noise-sd", float, 0.1),
        noise_coef=_merged(args, file_cfg, "simulate", "noise-coef", float, 0.3),
        seed=_merged(args, file_cfg, "simulate", "seed", int, 0),
    )
    if n_per_task:
        dgp_kwargs["n_per_task"] = tuple(int(v) for v in str(n_per_task).split(","))
    try:
        cfg = DgpConfig(**dgp_kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    reps = _merged(args, file_cfg, "simulate", "reps", int, 20)
    methods = _parse_methods(_merged(args, file_cfg, "simulate", "methods", str, None))
    n_jobs = _merged(args, file_cfg, "simulate", "n-jobs", int, 1)
    settings = {}
    max_degree = _merged(args, file_cfg, "basis", "max-degree", int, None)
    knots = _merged(args, file_cfg, "basis", "knots", int, None)
    folds = _merged(args, file_cfg, "cv", "folds", int, None)
    hal = {}
    if max_degree is not None:
        hal["max_degree"] = max_degree
    if knots is not None:
        hal["per_covariate_max"] = knots
    if folds is not None:
        hal["cv_folds"] = folds
        settings["mt-lasso"] = {"cv_folds": folds}
        settings["mt-l21"] = {"cv_folds": folds}
    if hal:
        settings["mt-hal"] = hal
    report = run_mc(cfg, methods, reps, n_jobs=n_jobs, method_settings=settings)
    write_text(args.out, report.to_text())
    print(report.format_table())
    return 0


def _cmd_evaluate(args) -> int:
    file_cfg = read_config_file(args.config) if args.config else {}
    tasks = _load_tasks(args, file_cfg)
    data = stack(tasks)
    scheme = _merged(args, file_cfg, "cv", "scheme", str,
                     "clustered" if data.cluster_ids is not None else "task-balanced")
    folds_n = _merged(args, file_cfg, "cv", "folds", int, 10)
    seed = _merged(args, file_cfg, "cv", "seed", int, 0)
    methods = _parse_methods(args.methods)
    hal_cfg = _hal_config(args, file_cfg)
    base_kwargs = _fit_config_kwargs(args, file_cfg)

    folds = make_folds(data, folds_n, scheme, seed)
    fmt = _merged(args, file_cfg, "data", "format", str, "generic")
    if fmt == "parkinsons":
        task_labels = {1: "mUPDRS", 2: "tUPDRS"}
    else:
        task_labels = {tid: f"task{tid}" for tid in data.task_ids}

    rows = []
    for method in methods:
        preds = np.full(data.n, np.nan)
        for v in range(1, folds_n + 1):
            tr = data.subset(folds.train_rows(v))
            va = data.subset(folds.val_rows(v))
            if method == "mt-hal":
                inner = dataclasses.replace(hal_cfg, cv_scheme=scheme, seed=seed + v)
                model = fit_mthal(tr.split(), inner)
            else:
                inner = BaselineConfig(**{**base_kwargs, "cv_scheme": scheme, "seed": seed + v})
                model = fit_baseline(method, tr.split(), inner)
            preds[folds.val_rows(v)] = model.predict(va)
        per_task = [mse(preds[data.task_rows(tid)], data.outcomes[data.task_rows(tid)])
                    for tid in data.task_ids]
        overall = mse(preds, data.outcomes)
        rows.append((method, per_task, overall))

    header = "method\t" + "\t".join(task_labels[tid] for tid in data.task_ids) + "\toverall"
    lines = [header]
    for method, per_task, overall in rows:
        vals = "\t".join(f"{v:.6g}" for v in per_task)
        lines.append(f"{method}\t{vals}\t{overall:.6g}")
    table = "\n".join(lines)
    write_text(args.out, table)
    print(table)
    return 0


def cli_run(argv) -> int:
    """Run the CLI; returns the process exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "fit":
            return _cmd_fit(args)
        if args.command == "predict":
            return _cmd_predict(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli_run(sys.argv[1:]))


if __name__ == "__main__":
    main()
