"""Multi-task Highly Adaptive Lasso.

Nonparametric multi-task regression via data-adaptive indicator bases shared
across tasks, with an l2,1 penalty selected by cross-validation, plus the
sparse linear baselines, simulation families and evaluation tooling.
"""

from .basis import (
    BasisFunction,
    GroupedDesign,
    Section,
    build_design,
    enumerate_sections,
    evaluate_basis,
    evaluate_design,
    select_knots,
)
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
from .estimator import (
    BaselineConfig,
    BaselineModel,
    MtHalConfig,
    MtHalModel,
    extract_support,
    fit_baseline,
    fit_mthal,
    load_model,
    predict,
    save_model,
)
from .io_cli import CsvSchema, cli_run, load_csv, load_parkinsons
from .metrics import SupportComparison, compare_support, dissimilarity, mse, support_metrics
from .simulate import DgpConfig, SimReplicate, SimReport, gen_replicate, run_mc
from .solver import (
    CoefficientState,
    PathResult,
    PlainDesign,
    fit_path,
    group_soft_threshold,
    kkt_residual,
    lambda_max,
    objective,
)

__version__ = "0.1.0"

__all__ = [
    "BasisFunction", "GroupedDesign", "Section", "build_design", "enumerate_sections",
    "evaluate_basis", "evaluate_design", "select_knots",
    "CvRiskTable", "FoldAssignment", "cv_select", "make_folds",
    "StackedDataset", "Standardizer", "TaskDataset", "stack",
    "standardize_apply", "standardize_fit", "task_balanced_weights",
    "BaselineConfig", "BaselineModel", "MtHalConfig", "MtHalModel",
    "extract_support", "fit_baseline", "fit_mthal", "load_model", "predict", "save_model",
    "CsvSchema", "cli_run", "load_csv", "load_parkinsons",
    "SupportComparison", "compare_support", "dissimilarity", "mse", "support_metrics",
    "DgpConfig", "SimReplicate", "SimReport", "gen_replicate", "run_mc",
    "CoefficientState", "PathResult", "PlainDesign", "fit_path",
    "group_soft_threshold", "kkt_residual", "lambda_max", "objective",
]
