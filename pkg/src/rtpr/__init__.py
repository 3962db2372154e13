"""Robust process regression with independent extended t-process errors.

Batches of noisy curves are modeled as a shared group-level process plus
per-curve errors, each side optionally heavy-tailed through positive
random scales with inverse-gamma priors.  Estimation maximizes an
adjusted profile (hierarchical) likelihood; predictions carry variances
corrected for the estimated scales, and the fitted per-curve scales act
as an outlying-curve diagnostic.
"""

from .errors import (
    EstimationError,
    InputError,
    NumericError,
    RtprError,
    UnsupportedModelError,
)
from .kernel import (
    KernelParams,
    add_jitter,
    cross_matrix,
    cross_vector,
    eval_kernel,
    gram_gradients,
    gram_matrix,
)
from .model import (
    BatchData,
    GroupData,
    ModelConfig,
    ProcessSpec,
    RandomEffects,
    build_covariance,
    covariance_partials,
    ig_log_density,
    make_config,
    model_name,
    sample_ig,
)
from .estimate import (
    Beta,
    Diagnostics,
    FitOptions,
    FitResult,
    adjusted_profile_m,
    blup_f,
    corrected_covariance_Hin,
    default_init,
    fit,
    h0_value,
    h1_value,
    laplace_B,
    r_scores,
    solve_r,
)
from .predict import (
    OutlierReport,
    OutlierRule,
    Prediction,
    etpr_variance_factor,
    outlier_scores,
    predict_new,
    predict_train,
)
from .simulate import (
    SimConfig,
    SimResult,
    inject_disturbance,
    make_design,
    mse,
    run_experiment,
    sample_errors,
    sample_truth,
    simulate_batch,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
