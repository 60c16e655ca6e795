"""Two extensions of the core prediction machinery.

1. Baseline-conditioned random effects: refit the linear mixed model with
   the baseline outcome moved from the predictors into the response vector;
   a new individual's random effect is then predicted from the baseline
   value alone by conditioning the joint Gaussian on that single
   observation.  Because only the first row of the random-effects design is
   involved, the conditional expectation collapses to

       b_tilde = (y_0 - x_0 beta_hat) / (D[0,0] + sigma2) * D[:, 0]

   which routes information to both the intercept and slope effects
   through the first column of D.

2. Percentage change between two time points j (later) and j' (earlier):
   f = (yhat_j - yhat_j') / yhat_j, with a first-order delta-method
   variance U' V U where V is the 2x2 joint prediction covariance of
   (yhat_j, yhat_j') and U is the gradient of yhat_j'/yhat_j, namely
   (-yhat_j'/yhat_j^2, 1/yhat_j).

Rules on the percentage-change scale reuse the ordinary interval rules
with the threshold reinterpreted as a change fraction; this pathway is
experimental (see ``pct_change_rule``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cohort import COLUMN_NAMES, CohortDataset, Subject, design_row, random_effects_row
from .errors import NearSingularRatioError, SubjectError
from .lmm import BlupResult, LmmFit, LmmSettings, fit_lmm_designs, predict_mean
from .rules import AlphaRule, interval_lower_bound

# the baseline outcome is a response in this mode, so its log10 column is gone
BASELINE_RESPONSE_COLUMNS = tuple(n for n in COLUMN_NAMES if n != "log10_cd4_baseline")
_DROPPED = COLUMN_NAMES.index("log10_cd4_baseline")


@dataclass(frozen=True)
class _Design:
    """Duck-typed stand-in for DesignPair with the 11-column layout."""

    x: np.ndarray
    z: np.ndarray
    knot_months: float


@dataclass
class BaselineConditionedRe:
    """Random-effect prediction conditioned on the baseline response only."""

    b_tilde: np.ndarray             # (2,)
    var_btilde_minus_b: np.ndarray  # (2, 2)
    cov_beta_btilde: np.ndarray     # (M, 2)

    def as_blup(self) -> BlupResult:
        """View with the BlupResult field layout, for variance-formula reuse."""
        return BlupResult(b_hat=self.b_tilde,
                          var_bhat_minus_b=self.var_btilde_minus_b,
                          cov_beta_bhat=self.cov_beta_btilde)


@dataclass(frozen=True)
class PctChangePrediction:
    """Predicted fractional change between two time points with its variance."""

    j_time: float
    jprime_time: float
    f_hat: float
    var_f_hat: float


def baseline_response_design(subject: Subject, knot_months: float = 1.0):
    """Design with the baseline row included and the baseline-CD4 column dropped.

    Returns ``(design, response)`` where the response holds all CD4 values
    including baseline, and x has the 11 ``BASELINE_RESPONSE_COLUMNS``.
    """
    base = subject.baseline
    rows, zrows, y = [], [], []
    for obs in subject.observations:
        full = design_row(obs.time_months, obs.wbc, obs.lymph_pct, base, knot_months)
        rows.append(np.delete(full, _DROPPED))
        zrows.append(random_effects_row(obs.time_months))
        y.append(obs.cd4)
    return _Design(x=np.stack(rows), z=np.stack(zrows), knot_months=knot_months), np.array(y)


def fit_lmm_baseline_response(data: CohortDataset, knot_months: float = 1.0,
                              settings: LmmSettings = LmmSettings()) -> LmmFit:
    """REML fit of the variant model with baseline CD4 in the response."""
    designs, responses = [], []
    for s in data.subjects:
        d, y = baseline_response_design(s, knot_months)
        designs.append(d)
        responses.append(y)
    return fit_lmm_designs(designs, responses, settings,
                           column_names=BASELINE_RESPONSE_COLUMNS,
                           knot_months=knot_months)


def baseline_conditioned_re(fit: LmmFit, subject: Subject) -> BaselineConditionedRe:
    """Predict a new subject's random effect from its baseline response.

    ``fit`` must come from ``fit_lmm_baseline_response`` (11 columns, baseline
    in the response); conditioning on any other fit layout is a usage error.
    """
    if fit.n_fixed != len(BASELINE_RESPONSE_COLUMNS):
        raise SubjectError(
            "baseline_conditioned_re requires a fit with the baseline-in-response "
            f"design ({len(BASELINE_RESPONSE_COLUMNS)} columns), got {fit.n_fixed}"
        )
    design, response = baseline_response_design(subject, fit.knot_months)
    x0, y0 = design.x[0], response[0]

    d = fit.d_hat
    denom = d[0, 0] + fit.sigma2_hat  # Var(y_0) since z_0 = (1, 0)
    resid0 = y0 - float(x0 @ fit.beta_hat)
    b_tilde = resid0 / denom * d[:, 0]

    var_core = d - np.outer(d[:, 0], d[0, :]) / denom
    t = np.outer(d[:, 0], x0) / denom          # (2, M) = D z0' Var(y0)^-1 x0
    var_btilde = var_core + t @ fit.var_beta_hat @ t.T
    cov_beta = -fit.var_beta_hat @ t.T          # (M, 2)
    return BaselineConditionedRe(
        b_tilde=b_tilde,
        var_btilde_minus_b=0.5 * (var_btilde + var_btilde.T),
        cov_beta_btilde=cov_beta,
    )


def predict_rows_baseline_re(fit: LmmFit, subject: Subject) -> np.ndarray:
    """Post-baseline predicted means using the baseline-conditioned effect."""
    bre = baseline_conditioned_re(fit, subject)
    design, _ = baseline_response_design(subject, fit.knot_months)
    return design.x[1:] @ fit.beta_hat + design.z[1:] @ bre.b_tilde


def _pct_change_covariance(fit: LmmFit, x2: np.ndarray, z2: np.ndarray,
                           mode: str, blup_result: BlupResult | None) -> np.ndarray:
    v = x2 @ fit.var_beta_hat @ x2.T + fit.sigma2_hat * np.eye(2)
    if mode == "new_individual_simple":
        pass
    elif mode == "new_individual_with_re":
        v = v + z2 @ fit.d_hat @ z2.T
    elif mode == "known_individual":
        if blup_result is None:
            raise SubjectError("known_individual mode requires a BlupResult")
        cross = x2 @ blup_result.cov_beta_bhat @ z2.T
        v = v + z2 @ blup_result.var_bhat_minus_b @ z2.T + cross + cross.T
    else:
        raise SubjectError(f"unknown prediction variance mode {mode!r}")
    return 0.5 * (v + v.T)


def pct_change_prediction(fit: LmmFit, x_j: np.ndarray, z_j: np.ndarray,
                          x_jprime: np.ndarray, z_jprime: np.ndarray,
                          b: np.ndarray | None = None,
                          mode: str = "new_individual_simple",
                          blup_result: BlupResult | None = None,
                          denominator_floor: float = 1.0) -> PctChangePrediction:
    """Fractional change (yhat_j - yhat_j')/yhat_j with delta-method variance.

    ``j`` is the later time point, ``j'`` the earlier one; ``b`` defaults to
    zero (new individual).  The denominator prediction must stay away from
    zero for the ratio expansion to be meaningful.
    """
    if b is None:
        b = blup_result.b_hat if (mode == "known_individual" and blup_result is not None) \
            else np.zeros(2)
    y_j = predict_mean(fit, x_j, z_j, b)
    y_jp = predict_mean(fit, x_jprime, z_jprime, b)
    if abs(y_j) < denominator_floor:
        raise NearSingularRatioError(
            f"predicted denominator {y_j:.4g} is below the floor {denominator_floor}"
        )
    x2 = np.stack([np.asarray(x_j, dtype=float), np.asarray(x_jprime, dtype=float)])
    z2 = np.stack([np.asarray(z_j, dtype=float), np.asarray(z_jprime, dtype=float)])
    v = _pct_change_covariance(fit, x2, z2, mode, blup_result)
    u = np.array([-y_jp / (y_j * y_j), 1.0 / y_j])
    var_f = float(u @ v @ u)
    return PctChangePrediction(
        j_time=float(z_j[1]),
        jprime_time=float(z_jprime[1]),
        f_hat=(y_j - y_jp) / y_j,
        var_f_hat=max(var_f, 0.0),
    )


def ratio_gradient(y_j: float, y_jprime: float) -> np.ndarray:
    """Gradient of y_j'/y_j with respect to (y_j, y_j'); exposed for checks."""
    return np.array([-y_jprime / (y_j * y_j), 1.0 / y_j])


def pct_change_lower_bound(pred: PctChangePrediction, alpha: float) -> float:
    """One-sided (1 - alpha) lower bound for the fractional change."""
    return interval_lower_bound(pred.f_hat, pred.var_f_hat, alpha)


def pct_change_rule(alpha: float, change_threshold: float = 0.20) -> AlphaRule:
    """Experimental: interval rule on the change scale.

    Classifies "change above ``change_threshold``" when the lower bound of
    the change interval exceeds the threshold; plug the output of
    ``pct_change_lower_bound`` into ``rules.classify``.
    """
    if not 0.0 < change_threshold:
        raise SubjectError("change_threshold must be positive")
    return AlphaRule(alpha=alpha, threshold_k=change_threshold, source="lmm_interval")
