"""Multi-fidelity variance reduction for rare-event probability estimation.

Importance sampling with cross-entropy-fitted Gaussian-mixture biasing
densities, classical and approximate control variates with ensemble
weight estimation, the matching closed-form theory, and the benchmark
model families (analytic thresholds, synthetic linear-Gaussian ensembles,
a cantilever beam with a Karhunen-Loeve modulus field, and a clamped
Mindlin plate).
"""

from .densities import (
    Density,
    FailureConditional,
    GaussianMixture,
    RngStream,
    StandardNormal,
    UniformBox,
    density_ratio,
    importance_weights,
    kl_divergence_mc,
    rejection_sample,
)
from .cross_entropy import CEState, EMConfig, ce_fit, em_update, responsibilities
from .estimators import (
    BatchMatrix,
    BatchPlan,
    EnsembleResult,
    acv_mc_estimate,
    cv_estimate,
    ensemble_acv_is,
    ensemble_cv_is,
    ensemble_cv_mc,
    estimated_weight,
    is_estimate,
    mc_estimate,
    sample_cov_batches,
)
from .models import (
    Model,
    ModelPair,
    analytic_pair,
    beam_pair,
    calibrate_thresholds,
    intermediate_threshold_model,
    plate_pair,
    synthetic_gaussian_family,
)
from .theory import (
    ModelStatistics,
    TheoryPrediction,
    f_matrix,
    min_ensembles,
    optimal_weight,
    r_squared,
    variance_profile,
    variance_ratio_prediction,
    weight_range,
)

__version__ = "0.1.0"
