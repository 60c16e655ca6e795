"""Prediction-based classification for longitudinal biomarkers.

Fit mixed-effects models to unevenly spaced repeated measures, turn the
fitted predictions into threshold classification rules (probability or
prediction-interval form), and evaluate those rules by ROC analysis,
resubstitution, independent test samples, and subject-level bootstrap.
"""

from .cohort import (
    COLUMN_NAMES,
    CohortDataset,
    DesignPair,
    Observation,
    Subject,
    build_design,
    load_cohort,
    save_cohort,
)
from .errors import (
    BootstrapError,
    ConditioningError,
    ConfigError,
    EmptyResponseError,
    LongpredError,
    NearSingularRatioError,
    NoFeasibleRuleError,
    NonConvergenceError,
    RecordError,
    SchemaError,
    SeparationError,
    SingularDesignError,
    SubjectError,
)
from .extensions import (
    BaselineConditionedRe,
    PctChangePrediction,
    baseline_conditioned_re,
    fit_lmm_baseline_response,
    pct_change_prediction,
)
from .glmm import (
    GlmmFit,
    GlmmSettings,
    IntegrationSpec,
    fit_glmm,
    glmm_marginal_loglik,
    posterior_mode_re,
    predict_theta,
)
from .lmm import (
    BlupResult,
    LmmFit,
    LmmSettings,
    blup,
    fit_lmm,
    predict_mean,
    prediction_variance,
)
from .rules import (
    AlphaRule,
    ConfusionTable,
    RocCurve,
    RuleEvaluation,
    classify,
    evaluate_rule,
    inverse_normal_cdf,
    lower_bound,
    roc_curve,
    select_rule,
    z_alpha,
)
from .simulate import GenerativeSpec, london_like_spec, simulate, simulate_binary
from .validation import (
    BootstrapCI,
    ValidationReport,
    ValidationSettings,
    bootstrap_ci,
    run_validation,
)

__version__ = "0.1.0"
