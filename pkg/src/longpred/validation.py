"""Learning/test validation protocol and subject-level bootstrap.

The protocol: fit the chosen model on the learning cohort, trace the
resubstitution ROC over an alpha grid, select one rule per false-positive
budget, then freeze those rules and apply them to an independent test
cohort.  Test-sample predictions follow the new-individual convention: the
random effect is set to zero, so only baseline CD4 and the time-varying
covariates drive the score - post-baseline test responses are never
conditioned on.

Resubstitution scores can optionally condition on each learning subject's
own responses (posterior random effects).  The continuous-model default
uses the same zero-random-effect convention as the test sample, mirroring
how the rules are meant to be deployed; the dichotomized model defaults to
posterior modes.  Both choices are flags.

Bootstrap confidence intervals resample whole subjects with replacement,
refit, reselect the rule at the budget inside each replicate (so the
interval reflects selection variability), and report empirical 5th/95th
percentiles of the resubstitution metrics.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import CohortDataset, Subject, stack_designs
from .errors import BootstrapError, LongpredError, SubjectError
from .glmm import GlmmFit, GlmmSettings, fit_glmm, posterior_mode_re, predict_theta_batch
from .lmm import LmmFit, LmmSettings, blup, fit_lmm, prediction_variance
from .rules import (
    AlphaRule,
    RocCurve,
    RuleEvaluation,
    default_alpha_grid,
    evaluate_rule,
    roc_curve,
    select_rule_evaluation,
    z_alpha,
)

log = logging.getLogger(__name__)

MODEL_KINDS = ("lmm", "glmm")


@dataclass(frozen=True)
class ValidationSettings:
    alphas: np.ndarray = field(default_factory=default_alpha_grid)
    knot_months: float = 1.0
    lmm_variance_mode: str = "new_individual_simple"
    # "auto": zero for the continuous model, posterior for the dichotomized one
    resub_random_effects: str = "auto"
    lmm: LmmSettings = LmmSettings()
    glmm: GlmmSettings = GlmmSettings()

    def resub_re_for(self, model_kind: str) -> str:
        if self.resub_random_effects != "auto":
            return self.resub_random_effects
        return "zero" if model_kind == "lmm" else "posterior"


@dataclass(frozen=True)
class ValidationEntry:
    """One (threshold, budget) cell of the validation report."""

    threshold_k: float
    fp_budget: float
    rule: AlphaRule
    resubstitution: RuleEvaluation
    test_sample: RuleEvaluation
    savings: float


@dataclass
class ValidationReport:
    model_kind: str
    entries: list[ValidationEntry]
    roc_curves: dict[float, RocCurve]

    @property
    def resubstitution(self) -> list[RuleEvaluation]:
        return [e.resubstitution for e in self.entries]

    @property
    def test_sample(self) -> list[RuleEvaluation]:
        return [e.test_sample for e in self.entries]


@dataclass(frozen=True)
class BootstrapCI:
    metric: str
    lower: float
    upper: float
    replicates: int
    failures: int = 0

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("lower percentile exceeds upper percentile")


def lmm_scores(fit: LmmFit, dataset: CohortDataset, random_effects: str = "zero",
               variance_mode: str = "new_individual_simple"):
    """Per-record (means, sds, cd4) for interval rules, in subject order.

    ``random_effects="posterior"`` conditions each subject's prediction on
    its own observed responses (resubstitution); ``"zero"`` uses the
    population average, the only option for new individuals.
    """
    designs, responses, _ = stack_designs(dataset, fit.knot_months, outcome="continuous")
    means, variances, cd4 = [], [], []
    for pair, resp in zip(designs, responses):
        if random_effects == "posterior":
            br = blup(fit, pair, resp)
            b = br.b_hat
            mode = "known_individual"
        elif random_effects == "zero":
            br, b, mode = None, np.zeros(2), variance_mode
        else:
            raise SubjectError(f"unknown random_effects choice {random_effects!r}")
        means.append(pair.x @ fit.beta_hat + pair.z @ b)
        variances.append([prediction_variance(fit, pair.x[j], pair.z[j], mode, br)
                          for j in range(pair.x.shape[0])])
        cd4.append(resp)
    return (np.concatenate(means), np.sqrt(np.concatenate(variances)),
            np.concatenate(cd4))


def glmm_scores(fit: GlmmFit, dataset: CohortDataset, random_effects: str = "posterior"):
    """Per-record (theta, cd4) for probability rules, in subject order."""
    designs, responses, _ = stack_designs(dataset, fit.knot_months,
                                          outcome="dichotomized",
                                          threshold_k=fit.threshold_k)
    _, cont_responses, _ = stack_designs(dataset, fit.knot_months, outcome="continuous")
    thetas = []
    for pair, resp in zip(designs, responses):
        if random_effects == "posterior":
            b = posterior_mode_re(fit, pair, resp)
        elif random_effects == "zero":
            b = np.zeros(2)
        else:
            raise SubjectError(f"unknown random_effects choice {random_effects!r}")
        thetas.append(predict_theta_batch(fit, pair.x, pair.z, b))
    return np.concatenate(thetas), np.concatenate(cont_responses)


def _resample(dataset: CohortDataset, rng: np.random.Generator) -> CohortDataset:
    """Subject bootstrap resample with exactly n_subjects slots, fresh ids."""
    n = dataset.n_subjects
    idx = rng.integers(0, n, size=n)
    subjects = tuple(
        Subject(id=f"{dataset.subjects[i].id}__b{slot}",
                observations=dataset.subjects[i].observations)
        for slot, i in enumerate(idx)
    )
    return CohortDataset(subjects=subjects, role_label=dataset.role_label)


def _fit_and_roc(learning: CohortDataset, model_kind: str, threshold_k: float,
                 settings: ValidationSettings):
    """Fit on the learning cohort and build the resubstitution ROC curve."""
    resub_re = settings.resub_re_for(model_kind)
    if model_kind == "lmm":
        fit = fit_lmm(learning, settings.knot_months, settings.lmm)
        means, sds, cd4 = lmm_scores(fit, learning, resub_re, settings.lmm_variance_mode)
        observed = (cd4 > threshold_k).astype(int)
        curve = roc_curve(observed, settings.alphas, "lmm_interval", threshold_k,
                          means=means, sds=sds)
    elif model_kind == "glmm":
        fit = fit_glmm(learning, threshold_k, settings.knot_months, settings.glmm)
        theta, cd4 = glmm_scores(fit, learning, resub_re)
        observed = (cd4 > threshold_k).astype(int)
        curve = roc_curve(observed, settings.alphas, "glmm_prob", threshold_k,
                          theta=theta)
    else:
        raise SubjectError(f"model kind must be one of {MODEL_KINDS}, got {model_kind!r}")
    return fit, curve


def _apply_to_test(fit, model_kind: str, rule: AlphaRule, test: CohortDataset,
                   settings: ValidationSettings):
    """Frozen-rule predictions on a test cohort under the b = 0 convention."""
    if model_kind == "lmm":
        means, sds, cd4 = lmm_scores(fit, test, "zero", settings.lmm_variance_mode)
        lb = means - z_alpha(rule.alpha) * sds
        predictions = (lb > rule.threshold_k).astype(int)
    else:
        theta, cd4 = glmm_scores(fit, test, "zero")
        predictions = (theta >= 1.0 - rule.alpha).astype(int)
    if predictions.size == 0:
        raise SubjectError("test cohort produced no predictions")
    observed = (cd4 > rule.threshold_k).astype(int)
    evaluation = evaluate_rule(rule, predictions, observed)
    savings = evaluation.table.n1_ / evaluation.table.total
    return evaluation, savings


def run_validation(learning: CohortDataset, test: CohortDataset,
                   thresholds, budgets, model_kind: str = "lmm",
                   settings: ValidationSettings = ValidationSettings()) -> ValidationReport:
    """Full protocol: fit, select rules on learning data, evaluate on test data."""
    entries = []
    curves: dict[float, RocCurve] = {}
    for k in thresholds:
        fit, curve = _fit_and_roc(learning, model_kind, float(k), settings)
        curves[float(k)] = curve
        for budget in budgets:
            chosen = select_rule_evaluation(curve, float(budget))
            test_eval, savings = _apply_to_test(fit, model_kind, chosen.rule, test, settings)
            entries.append(ValidationEntry(
                threshold_k=float(k), fp_budget=float(budget), rule=chosen.rule,
                resubstitution=chosen, test_sample=test_eval, savings=savings,
            ))
    return ValidationReport(model_kind=model_kind, entries=entries, roc_curves=curves)


def empirical_percentiles(values, probs=(0.05, 0.95)):
    """Order-statistic percentiles: the ceil(q*n)-th smallest value.

    With two values this returns (min, max) for (0.05, 0.95); no
    interpolation is performed.
    """
    v = np.sort(np.asarray(values, dtype=float))
    n = v.size
    if n == 0:
        raise ValueError("no values to take percentiles of")
    out = []
    for q in probs:
        rank = min(max(int(math.ceil(q * n)), 1), n)
        out.append(float(v[rank - 1]))
    return tuple(out)


def _bootstrap_once(learning: CohortDataset, threshold_k: float, fp_budget: float,
                    model_kind: str, settings: ValidationSettings,
                    seed: int, replicate: int):
    rng = np.random.default_rng([seed, replicate])
    resampled = _resample(learning, rng)
    _, curve = _fit_and_roc(resampled, model_kind, threshold_k, settings)
    chosen = select_rule_evaluation(curve, fp_budget)
    return {"sensitivity": chosen.sensitivity, "ppv": chosen.ppv, "npv": chosen.npv}


def _bootstrap_worker(args):
    learning, threshold_k, fp_budget, model_kind, settings, seed, replicate = args
    try:
        return replicate, _bootstrap_once(learning, threshold_k, fp_budget,
                                          model_kind, settings, seed, replicate), None
    except LongpredError as exc:
        return replicate, None, f"{type(exc).__name__}: {exc}"


def bootstrap_ci(learning: CohortDataset, threshold_k: float, fp_budget: float,
                 replicates: int = 100, seed: int = 0, model_kind: str = "lmm",
                 settings: ValidationSettings = ValidationSettings(),
                 workers: int = 1, max_failure_fraction: float = 0.2) -> list[BootstrapCI]:
    """Subject-bootstrap 5th/95th percentile intervals for the rule metrics.

    Each replicate resamples subjects with replacement (fresh ids keep the
    random effects exchangeable), refits, rebuilds the ROC, reselects the
    rule at ``fp_budget``, and records sensitivity/PPV/NPV.  Replicate RNG
    streams are derived from (seed, replicate index), so results do not
    depend on worker scheduling.  Failed replicate fits are logged and
    excluded; more than ``max_failure_fraction`` failures aborts.
    """
    if replicates < 2:
        raise SubjectError(f"replicates must be >= 2, got {replicates}")
    args = [(learning, float(threshold_k), float(fp_budget), model_kind,
             settings, int(seed), r) for r in range(replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(_bootstrap_worker, args))
    else:
        raw = [_bootstrap_worker(a) for a in args]
    raw.sort(key=lambda t: t[0])

    results, failures = [], 0
    for replicate, metrics, err in raw:
        if err is not None:
            failures += 1
            log.warning("bootstrap replicate %d failed: %s", replicate, err)
        else:
            results.append(metrics)
    if failures > max_failure_fraction * replicates:
        raise BootstrapError(
            f"{failures}/{replicates} bootstrap replicates failed to fit; "
            "the learning cohort is too fragile for resampling at this budget"
        )

    out = []
    for metric in ("sensitivity", "ppv", "npv"):
        values = [m[metric] for m in results if m[metric] is not None]
        if not values:
            log.warning("metric %s undefined in every completed replicate", metric)
            continue
        lo, hi = empirical_percentiles(values)
        out.append(BootstrapCI(metric=metric, lower=lo, upper=hi,
                               replicates=len(values), failures=failures))
    return out


def _fmt(v, width=8):
    return f"{v:.4f}".ljust(width) if v is not None else "-".ljust(width)


def render_report_text(report: ValidationReport) -> str:
    """Human-readable table: one resubstitution and one test row per rule."""
    lines = [
        f"predictive performance (model: {report.model_kind})",
        f"{'threshold':<10}{'budget':<8}{'alpha':<8}{'sample':<16}"
        f"{'sens':<8}{'spec':<8}{'fp':<8}{'ppv':<8}{'npv':<8}{'savings':<8}",
    ]
    for e in report.entries:
        r, t = e.resubstitution, e.test_sample
        lines.append(
            f"{'K=' + format(e.threshold_k, 'g'):<10}{e.fp_budget:<8.3f}"
            f"{e.rule.alpha:<8.3f}{'resubstitution':<16}"
            f"{_fmt(r.sensitivity)}{_fmt(r.specificity)}{_fmt(r.fp_rate)}"
            f"{_fmt(r.ppv)}{_fmt(r.npv)}{'-':<8}"
        )
        lines.append(
            f"{'K=' + format(e.threshold_k, 'g'):<10}{e.fp_budget:<8.3f}"
            f"{e.rule.alpha:<8.3f}{'test':<16}"
            f"{_fmt(t.sensitivity)}{_fmt(t.specificity)}{_fmt(t.fp_rate)}"
            f"{_fmt(t.ppv)}{_fmt(t.npv)}{_fmt(e.savings)}"
        )
    return "\n".join(lines) + "\n"
