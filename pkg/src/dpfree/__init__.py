"""dpfree: differentially private training without hyperparameter tuning.

The package privatizes both the gradients and the loss values of a training
run, spends a single (epsilon, delta) budget across the two release families
with closed-form Gaussian-DP accounting, and uses the privatized losses to
fit the learning rate on the fly. See README.md for the full tour.
"""

from .accounting import (
    AccountingError,
    CalibrationRangeError,
    InfeasiblePlanError,
    NoisePlan,
    PrivacyBudget,
    SamplingSpec,
    budget_to_mu,
    calibrate_sigma,
    compose_mu,
    default_delta,
    gradient_epsilon,
    mu_gradient,
    mu_loss,
    mu_to_delta,
    mu_to_epsilon,
    plan_report,
    realized_epsilon,
    solve_noise_plan,
)
from .estimators import AutoDPClassifier, AutoDPRegressor
from .mechanisms import (
    PerSampleBatch,
    PrivatizedGradient,
    PrivatizedLoss,
    clip_factor,
    privatize_gradient_auto,
    privatize_gradient_fixed,
    privatize_loss,
)
from .models import (
    Dataset,
    LinearRegressionModel,
    LogisticRegressionModel,
    MlpClassifier,
    QuadraticBowl,
    build_model,
    load_csv,
    make_synthetic,
)
from .normal import (
    clipping_bias_analytic,
    clipping_bias_empirical,
    normal_cdf,
    normal_pdf,
    tail_mean,
    tail_probability,
)
from .stepsize import (
    LossProbe,
    LrState,
    QuadFit,
    fit_quadratic,
    update_loss_clip,
    update_lr,
)
from .training import (
    DivergenceError,
    RunResult,
    TraceRow,
    TrainerConfig,
    iterate_batches,
    spawn_streams,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AccountingError",
    "AutoDPClassifier",
    "AutoDPRegressor",
    "CalibrationRangeError",
    "Dataset",
    "DivergenceError",
    "InfeasiblePlanError",
    "LinearRegressionModel",
    "LogisticRegressionModel",
    "LossProbe",
    "LrState",
    "MlpClassifier",
    "NoisePlan",
    "PerSampleBatch",
    "PrivacyBudget",
    "PrivatizedGradient",
    "PrivatizedLoss",
    "QuadFit",
    "QuadraticBowl",
    "RunResult",
    "SamplingSpec",
    "TraceRow",
    "TrainerConfig",
    "budget_to_mu",
    "build_model",
    "calibrate_sigma",
    "clip_factor",
    "clipping_bias_analytic",
    "clipping_bias_empirical",
    "compose_mu",
    "default_delta",
    "fit_quadratic",
    "gradient_epsilon",
    "iterate_batches",
    "load_csv",
    "make_synthetic",
    "mu_gradient",
    "mu_loss",
    "mu_to_delta",
    "mu_to_epsilon",
    "normal_cdf",
    "normal_pdf",
    "plan_report",
    "privatize_gradient_auto",
    "privatize_gradient_fixed",
    "privatize_loss",
    "realized_epsilon",
    "solve_noise_plan",
    "spawn_streams",
    "tail_mean",
    "tail_probability",
    "train",
    "update_loss_clip",
    "update_lr",
]
