"""Fixed-effects panel inference: threshold regression, mediation and placebo tests."""

from .fe_core import (
    CollinearityError,
    ConvergenceError,
    FitResult,
    WaldResult,
    cluster_robust_cov,
    fit_fe,
    vif,
    wald_equality,
    within_transform,
)
from .mediation import MediationResult, fit_mediation, sobel_test
from .panel_data import (
    DesignSample,
    ModelSpec,
    PanelDataset,
    PanelError,
    VariableSpec,
    build_design,
    load_panel,
    quantile_of,
)
from .robustness import PlaceboResult, fit_lagged, residual_permutation_placebo
from .synthetic import DgpConfig, GroundTruth, generate_panel
from .threshold import (
    GroupedResult,
    ThresholdResult,
    bootstrap_lr_test,
    fit_threshold,
    grid_candidates,
    grouped_fit,
    lr_confidence_interval,
)

__version__ = "0.1.0"

__all__ = [
    "CollinearityError",
    "ConvergenceError",
    "DesignSample",
    "DgpConfig",
    "FitResult",
    "GroundTruth",
    "GroupedResult",
    "MediationResult",
    "ModelSpec",
    "PanelDataset",
    "PanelError",
    "PlaceboResult",
    "ThresholdResult",
    "VariableSpec",
    "WaldResult",
    "bootstrap_lr_test",
    "build_design",
    "cluster_robust_cov",
    "fit_fe",
    "fit_lagged",
    "fit_mediation",
    "fit_threshold",
    "generate_panel",
    "grid_candidates",
    "grouped_fit",
    "load_panel",
    "lr_confidence_interval",
    "quantile_of",
    "residual_permutation_placebo",
    "sobel_test",
    "vif",
    "wald_equality",
    "within_transform",
]
