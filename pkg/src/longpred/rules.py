"""Threshold classification rules, confusion metrics, and ROC selection.

Two rule families target the same event "biomarker above threshold K":

- probability form: classify positive iff the predicted probability
  theta_hat is at least 1 - alpha;
- interval form: classify positive iff the lower bound of the one-sided
  (1 - alpha) prediction interval, mean - z_alpha * sd, exceeds K.

Under a normal predictive model the two forms select identical sets (up to
boundary ties), which the test suite checks on random instances.  Varying
alpha traces an ROC curve; rule selection picks the most sensitive rule
whose false-positive rate stays within a budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NoFeasibleRuleError, SubjectError
from .lmm import BlupResult, LmmFit, predict_mean, prediction_variance

SOURCES = ("glmm_prob", "lmm_interval")

# Acklam's rational approximation to the inverse normal CDF; a single
# Halley refinement with erfc brings it to near machine precision.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def inverse_normal_cdf(p: float) -> float:
    """Standard-normal quantile, accurate to well below 1e-9."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    # one Halley step: e = Phi(x) - p
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def z_alpha(alpha: float) -> float:
    """Upper-alpha standard normal quantile (z such that P(Z > z) = alpha)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return inverse_normal_cdf(1.0 - alpha)


@dataclass(frozen=True)
class AlphaRule:
    """One classification rule: its alpha level, threshold, and rule family."""

    alpha: float
    threshold_k: float
    source: str = "lmm_interval"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.threshold_k <= 0:
            raise ValueError(f"threshold_k must be positive, got {self.threshold_k}")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")


@dataclass(frozen=True)
class ConfusionTable:
    """Counts by predicted (rows) x observed (columns) class.

    n11 predicted-above & observed-above, n12 predicted-above &
    observed-below, n21 predicted-below & observed-above, n22 both below.
    """

    n11: int
    n12: int
    n21: int
    n22: int

    def __post_init__(self):
        for name in ("n11", "n12", "n21", "n22"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def n1_(self) -> int:  # predicted above
        return self.n11 + self.n12

    @property
    def n2_(self) -> int:  # predicted below
        return self.n21 + self.n22

    @property
    def n_1(self) -> int:  # observed above
        return self.n11 + self.n21

    @property
    def n_2(self) -> int:  # observed below
        return self.n12 + self.n22

    @property
    def total(self) -> int:
        return self.n11 + self.n12 + self.n21 + self.n22


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


@dataclass(frozen=True)
class RuleEvaluation:
    """A rule together with its confusion table and derived metrics.

    Metrics with a zero denominator are ``None`` (absent), never zero.
    """

    rule: AlphaRule
    table: ConfusionTable
    sensitivity: float | None
    specificity: float | None
    fp_rate: float | None
    ppv: float | None
    npv: float | None

    @classmethod
    def from_table(cls, rule: AlphaRule, table: ConfusionTable) -> "RuleEvaluation":
        spec = _ratio(table.n22, table.n_2)
        return cls(
            rule=rule,
            table=table,
            sensitivity=_ratio(table.n11, table.n_1),
            specificity=spec,
            fp_rate=None if spec is None else _ratio(table.n12, table.n_2),
            ppv=_ratio(table.n11, table.n1_),
            npv=_ratio(table.n22, table.n2_),
        )


def classify(rule: AlphaRule, model_output: float) -> int:
    """Apply a rule to one model output.

    For ``glmm_prob`` the output is a predicted probability and the rule is
    theta >= 1 - alpha; for ``lmm_interval`` the output is the interval
    lower bound already computed at the rule's alpha, and the rule is
    strictly lower_bound > K.
    """
    if rule.source == "glmm_prob":
        return int(model_output >= 1.0 - rule.alpha)
    return int(model_output > rule.threshold_k)


def interval_lower_bound(mean: float, variance: float, alpha: float) -> float:
    """Lower bound of the one-sided (1 - alpha) prediction interval."""
    if variance < 0:
        raise ValueError(f"variance must be non-negative, got {variance}")
    return mean - z_alpha(alpha) * math.sqrt(variance)


def lower_bound(fit: LmmFit, x_row: np.ndarray, z_row: np.ndarray, alpha: float,
                mode: str = "new_individual_simple",
                blup_result: BlupResult | None = None) -> float:
    """Prediction-interval lower bound for one design row of a mixed model.

    The predicted mean uses b = 0 for the new-individual modes and the
    subject's predicted random effect in ``known_individual`` mode; the
    variance comes from ``prediction_variance`` in the same mode.
    """
    b = blup_result.b_hat if (mode == "known_individual" and blup_result is not None) \
        else np.zeros(2)
    mean = predict_mean(fit, x_row, z_row, b)
    var = prediction_variance(fit, x_row, z_row, mode, blup_result)
    return interval_lower_bound(mean, var, alpha)


def evaluate_rule(rule: AlphaRule, predictions, observed) -> RuleEvaluation:
    """Confusion table and metrics for binary predictions vs. observations."""
    pred = np.asarray(predictions).astype(int)
    obs = np.asarray(observed).astype(int)
    if pred.shape != obs.shape or pred.ndim != 1:
        raise SubjectError(
            f"predictions and observed must be equal-length vectors, "
            f"got {pred.shape} and {obs.shape}"
        )
    if pred.size == 0:
        raise SubjectError("cannot evaluate a rule on zero records")
    table = ConfusionTable(
        n11=int(np.sum((pred == 1) & (obs == 1))),
        n12=int(np.sum((pred == 1) & (obs == 0))),
        n21=int(np.sum((pred == 0) & (obs == 1))),
        n22=int(np.sum((pred == 0) & (obs == 0))),
    )
    return RuleEvaluation.from_table(rule, table)


@dataclass(frozen=True)
class RocCurve:
    """Rule evaluations over an alpha grid, ordered by false-positive rate."""

    evaluations: tuple[RuleEvaluation, ...]

    @property
    def points(self) -> list[tuple[float, float, float]]:
        """(alpha, fp_rate, sensitivity) triples, fp ascending."""
        return [(e.rule.alpha, e.fp_rate, e.sensitivity) for e in self.evaluations]

    def auc(self) -> float:
        """Trapezoidal area under the (fp, sensitivity) polyline."""
        fp = np.array([0.0] + [e.fp_rate for e in self.evaluations] + [1.0])
        se = np.array([0.0] + [e.sensitivity for e in self.evaluations] + [1.0])
        return float(np.trapezoid(se, fp))


def default_alpha_grid() -> np.ndarray:
    """199 levels 0.005, 0.010, ..., 0.995."""
    return np.round(np.arange(1, 200) * 0.005, 6)


def batch_classify(rule: AlphaRule, theta=None, means=None, sds=None) -> np.ndarray:
    """Vectorized rule application over records.

    ``glmm_prob`` rules need ``theta``; ``lmm_interval`` rules need
    ``means`` and ``sds`` (the lower bound is recomputed per alpha).
    """
    if rule.source == "glmm_prob":
        if theta is None:
            raise SubjectError("glmm_prob rules need predicted probabilities")
        return (np.asarray(theta) >= 1.0 - rule.alpha).astype(int)
    if means is None or sds is None:
        raise SubjectError("lmm_interval rules need means and sds")
    lb = np.asarray(means) - z_alpha(rule.alpha) * np.asarray(sds)
    return (lb > rule.threshold_k).astype(int)


def roc_curve(observed, alphas, source: str, threshold_k: float,
              theta=None, means=None, sds=None) -> RocCurve:
    """Evaluate one rule per alpha level and assemble the ROC curve.

    ``observed`` must contain both classes, otherwise specificity or
    sensitivity is undefined at every point.
    """
    alphas = np.asarray(alphas, dtype=float)
    if alphas.ndim != 1 or alphas.size == 0:
        raise SubjectError("alpha grid must be a non-empty 1-D array")
    if np.any(alphas <= 0) or np.any(alphas >= 1) or np.any(np.diff(alphas) <= 0):
        raise SubjectError("alpha grid must be strictly increasing within (0, 1)")
    obs = np.asarray(observed).astype(int)
    if obs.min() == obs.max():
        raise SubjectError("observed outcomes contain a single class; ROC undefined")

    evaluations = []
    for a in alphas:
        rule = AlphaRule(alpha=float(a), threshold_k=threshold_k, source=source)
        pred = batch_classify(rule, theta=theta, means=means, sds=sds)
        evaluations.append(evaluate_rule(rule, pred, obs))
    evaluations.sort(key=lambda e: (e.fp_rate, e.sensitivity, e.rule.alpha))
    return RocCurve(evaluations=tuple(evaluations))


def select_rule_evaluation(curve: RocCurve, fp_budget: float) -> RuleEvaluation:
    """Most sensitive point with fp_rate <= budget.

    Ties are broken by smaller fp_rate, then smaller alpha.
    """
    if not curve.evaluations:
        raise NoFeasibleRuleError("empty ROC curve")
    feasible = [e for e in curve.evaluations
                if e.fp_rate is not None and e.fp_rate <= fp_budget]
    if not feasible:
        raise NoFeasibleRuleError(
            f"no rule satisfies false-positive budget {fp_budget}; "
            f"minimum achievable is {min(e.fp_rate for e in curve.evaluations)}"
        )
    return min(feasible, key=lambda e: (-(e.sensitivity or 0.0), e.fp_rate, e.rule.alpha))


def select_rule(curve: RocCurve, fp_budget: float) -> AlphaRule:
    return select_rule_evaluation(curve, fp_budget).rule


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def roc_to_csv(curve: RocCurve, path) -> None:
    """Write (alpha, fp_rate, sensitivity, ppv, npv) rows, fp ascending."""
    lines = ["alpha,fp_rate,sensitivity,ppv,npv"]
    for e in curve.evaluations:
        lines.append(",".join([repr(float(e.rule.alpha)), _fmt(e.fp_rate),
                               _fmt(e.sensitivity), _fmt(e.ppv), _fmt(e.npv)]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


_SVG_HEADER = (
    '<svg xmlns="http://www.w3.org/2000/svg" width="480" height="480" '
    'viewBox="0 0 480 480">\n'
)


def roc_to_svg(curve: RocCurve, path, title: str = "ROC") -> None:
    """Static SVG rendering: false-positive rate on x, sensitivity on y."""
    x0, y0, w, h = 60.0, 420.0, 380.0, 380.0

    def px(fp):
        return x0 + w * fp

    def py(se):
        return y0 - h * se

    pts = " ".join(f"{px(e.fp_rate):.2f},{py(e.sensitivity):.2f}"
                   for e in curve.evaluations
                   if e.fp_rate is not None and e.sensitivity is not None)
    parts = [_SVG_HEADER]
    parts.append(f'<text x="240" y="24" text-anchor="middle" font-size="14">{title}</text>\n')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + w}" y2="{y0}" stroke="black"/>\n')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y0 - h}" stroke="black"/>\n')
    for tick in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0):
        parts.append(f'<line x1="{px(tick):.2f}" y1="{y0}" x2="{px(tick):.2f}" '
                     f'y2="{y0 + 5}" stroke="black"/>\n')
        parts.append(f'<text x="{px(tick):.2f}" y="{y0 + 20}" text-anchor="middle" '
                     f'font-size="11">{tick:.1f}</text>\n')
        parts.append(f'<line x1="{x0 - 5}" y1="{py(tick):.2f}" x2="{x0}" '
                     f'y2="{py(tick):.2f}" stroke="black"/>\n')
        parts.append(f'<text x="{x0 - 10}" y="{py(tick) + 4:.2f}" text-anchor="end" '
                     f'font-size="11">{tick:.1f}</text>\n')
    parts.append('<text x="250" y="460" text-anchor="middle" font-size="12">'
                 'False positive rate</text>\n')
    parts.append('<text x="16" y="230" text-anchor="middle" font-size="12" '
                 'transform="rotate(-90 16 230)">Sensitivity</text>\n')
    parts.append(f'<line x1="{px(0):.2f}" y1="{py(0):.2f}" x2="{px(1):.2f}" '
                 f'y2="{py(1):.2f}" stroke="#bbbbbb" stroke-dasharray="4 4"/>\n')
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f4e9c" stroke-width="1.5"/>\n')
    parts.append("</svg>\n")
    with open(path, "w") as fh:
        fh.write("".join(parts))
