"""Diffusion-distilled one-step generators for potential-outcome estimation.

Pipeline: pretrain a covariate- and treatment-conditional denoiser on
observational tabular data, distill it into a one-step generator whose
training batches emulate a randomized trial (shuffled covariates, coin-flip
treatments), then predict potential outcomes and treatment effects by
conditional sampling. The analysis tools verify the importance-weighting
identity behind that adjustment and the variance advantage of marginal
sampling over explicit inverse-propensity weighting.
"""

from .data import (
    ColumnSpec,
    DataFormatError,
    Dataset,
    StandardizationStats,
    destandardize_y,
    generate_synthetic,
    load_csv,
    save_csv,
    split,
    standardize,
)
from .nn import (
    AdamState,
    GradCheckReport,
    Mlp,
    MlpGrads,
    NonFiniteGradientError,
    adam_step,
    grad_check,
    mlp_backward,
    mlp_forward,
)
from .diffusion import (
    Denoiser,
    NoiseSchedule,
    PretrainConfig,
    TrainingDivergedError,
    denoise,
    load_denoiser,
    precondition_coeffs,
    pretrain,
    sample_reverse,
    sample_training_sigma,
    save_denoiser,
    sigma_of_t,
)
from .distill import (
    DistillConfig,
    OneStepGenerator,
    PropensityModel,
    distill,
    distill_ipw,
    fake_loss,
    generator_forward,
    generator_loss,
    ipw_weight,
    load_generator,
    propensity_fit,
    randomization_adjust,
    save_generator,
    time_and_noise,
    weight_wt,
)
from .analysis import (
    GradVarianceReport,
    Lemma1Result,
    MetricsReport,
    OracleSampler,
    OverlapViolationError,
    TeacherSampler,
    compute_metrics,
    delta_pi,
    grad_variance_experiment,
    lemma1_check_discrete,
    lemma1_check_sampled,
    pehe,
    predict_po,
    rmse,
    win_rates,
)

__version__ = "0.1.0"
