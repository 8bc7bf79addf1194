"""Condition-number control of linear-probing Hessians.

Spectral penalties with closed-form gradients drive the probe Hessian of a
harmful task toward ill-conditioning while keeping a pretraining task
well-conditioned; the training loop applies them through a covariance
preconditioner alongside the supervised loss.
"""

__version__ = "0.1.0"

from .datasets import Dataset, SyntheticSpec, TabularConfig, load_idx_pair, load_tabular, synthesize
from .evaluation import (
    ImmunizationVerdict,
    RirBreakdown,
    VerdictThresholds,
    experiment_report,
    rir,
    rir_sampled,
    verdict,
)
from .immunizer import (
    AdamParams,
    ImmunizationConfig,
    Method,
    OptimizerKind,
    TrainReport,
    adam_step,
    auto_balance_lambdas,
    baseline_imma,
    baseline_opt_kappa,
    baseline_rill_only,
    immunize,
    run_method,
)
from .probe import (
    LossKind,
    ProbeProblem,
    ProbeTrajectory,
    closed_form_optimum,
    gd_exact_line_search,
    probe_features,
    probe_loss_and_grad,
)
from .regularizers import (
    RegEval,
    StepBound,
    StepSource,
    r_ill_grad,
    r_ill_grad_theta,
    r_ill_value,
    r_well_grad,
    r_well_grad_theta,
    r_well_value,
    safe_step_ill_on_s,
    safe_step_ill_on_theta,
    safe_step_well_on_s,
    safe_step_well_on_theta,
)
from .spectral import (
    SpectralDecomposition,
    Spectrum,
    condition_number,
    covariance,
    hessian,
    precond_apply,
    predicted_singular_values,
    svd_compact,
)
