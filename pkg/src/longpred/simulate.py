"""Synthetic cohort generator.

Generates cohorts from the same mixed-model data-generating process the
estimators assume: piecewise-linear fixed effects built from baseline and
time-varying covariates, Gaussian random intercept and slope per subject,
independent Gaussian measurement noise.  Because the true coefficients,
covariance, and per-subject random effects are returned alongside the data,
every estimator and classification rule in the package can be checked
against ground truth.

Covariate series (wbc, lymph%) follow a mean-reverting process around each
subject's baseline value with time-aware autocorrelation; the outcome model
never conditions on how covariates evolve, so any stationary choice is
admissible here.

Default parameters are calibrated to a realistic treatment-response cohort:
median baseline CD4 around 220 cells/mm3 with interquartile range roughly
(114, 333), median follow-up about 25 months, median of 9 post-baseline
visits (range 2 to 24), a fast CD4 rise in the first month and a slow rise
thereafter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import CohortDataset, Observation, Subject, design_row, random_effects_row

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VisitProcess:
    """Distribution of follow-up length and visit times."""

    median_followup_months: float = 25.0
    log_followup_sigma: float = 0.45
    median_n_visits: float = 9.0
    log_n_visits_sigma: float = 0.42
    min_visits: int = 2
    max_visits: int = 24
    max_followup_months: float = 36.0
    min_first_visit_months: float = 0.25


@dataclass(frozen=True)
class CovariateProcess:
    """Mean-reverting evolution of a covariate around its baseline value."""

    baseline_mean: float
    baseline_sd: float
    stationary_sd: float
    autocorr_per_month: float
    lower: float
    upper: float

    def sample_baseline(self, rng: np.random.Generator) -> float:
        v = rng.normal(self.baseline_mean, self.baseline_sd)
        return float(np.clip(v, self.lower, self.upper))

    def step(self, prev: float, anchor: float, dt_months: float,
             rng: np.random.Generator) -> float:
        """One mean-reverting step of length ``dt_months`` toward ``anchor``."""
        phi = self.autocorr_per_month ** dt_months
        sd = self.stationary_sd * np.sqrt(max(1.0 - phi * phi, 0.0))
        v = anchor + phi * (prev - anchor) + rng.normal(0.0, sd)
        return float(np.clip(v, self.lower, self.upper))


def default_beta() -> np.ndarray:
    """Fixed-effects vector producing realistic CD4 trajectories.

    Ordered as the 12 design columns: intercept, log10 baseline CD4,
    baseline wbc, baseline lymph%, t, (t-knot)+, wbc, lymph%, and the four
    time-by-baseline interactions.  Pre-knot slope is fast (~tens of cells
    per month), post-knot slope slow (a few cells per month).
    """
    return np.array([
        -635.0,   # intercept
        330.0,    # log10 baseline cd4 (strong tracking of the baseline level)
        4.0,      # baseline wbc
        1.5,      # baseline lymph%
        55.0,     # t (pre-knot rise)
        -50.0,    # (t - knot)+ (slowdown after the knot)
        3.0,      # wbc at visit
        1.2,      # lymph% at visit
        0.50,     # t * baseline wbc
        0.10,     # t * baseline lymph%
        -0.40,    # (t - knot)+ * baseline wbc
        -0.080,   # (t - knot)+ * baseline lymph%
    ])


def default_d() -> np.ndarray:
    """Random intercept/slope covariance (cells/mm3 scale)."""
    return np.array([[4900.0, 56.0], [56.0, 16.0]])


@dataclass(frozen=True)
class GenerativeSpec:
    """Everything needed to draw a cohort reproducibly."""

    beta_true: np.ndarray = field(default_factory=default_beta)
    d_true: np.ndarray = field(default_factory=default_d)
    sigma2_true: float = 2025.0  # 45 cells/mm3 residual sd
    n_subjects: int = 270
    knot_months: float = 1.0
    visits: VisitProcess = field(default_factory=VisitProcess)
    # log10 baseline CD4 ~ Normal(log10(219.5), 0.345): IQR approx (114, 333)
    log10_cd4_baseline_mean: float = 2.341435
    log10_cd4_baseline_sd: float = 0.345
    cd4_baseline_range: tuple[float, float] = (10.0, 1500.0)
    wbc: CovariateProcess = CovariateProcess(
        baseline_mean=5.0, baseline_sd=1.5, stationary_sd=1.0,
        autocorr_per_month=0.85, lower=0.5, upper=20.0)
    lymph: CovariateProcess = CovariateProcess(
        baseline_mean=25.0, baseline_sd=8.0, stationary_sd=5.0,
        autocorr_per_month=0.85, lower=1.0, upper=70.0)
    cd4_floor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        beta = np.asarray(self.beta_true, dtype=float)
        d = np.asarray(self.d_true, dtype=float)
        object.__setattr__(self, "beta_true", beta)
        object.__setattr__(self, "d_true", d)
        if beta.shape != (12,):
            raise ValueError(f"beta_true must have shape (12,), got {beta.shape}")
        if d.shape != (2, 2) or not np.allclose(d, d.T):
            raise ValueError("d_true must be symmetric 2x2")
        if np.linalg.eigvalsh(d).min() < -1e-10:
            raise ValueError("d_true must be positive semi-definite")
        if self.sigma2_true < 0:
            raise ValueError("sigma2_true must be non-negative")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")


def _visit_times(spec: GenerativeSpec, rng: np.random.Generator) -> np.ndarray:
    """Strictly increasing post-baseline visit times for one subject."""
    v = spec.visits
    followup = float(np.exp(rng.normal(np.log(v.median_followup_months), v.log_followup_sigma)))
    followup = float(np.clip(followup, 2.0, v.max_followup_months))
    n = int(np.rint(np.exp(rng.normal(np.log(v.median_n_visits), v.log_n_visits_sigma))))
    n = int(np.clip(n, v.min_visits, v.max_visits))
    times = np.sort(rng.uniform(v.min_first_visit_months, followup, size=n))
    # enforce strict increase; collisions from uniform draws are possible
    for i in range(1, n):
        if times[i] <= times[i - 1]:
            times[i] = times[i - 1] + 1e-3
    return times


def _covariate_paths(spec: GenerativeSpec, times: np.ndarray, rng: np.random.Generator):
    w0 = spec.wbc.sample_baseline(rng)
    l0 = spec.lymph.sample_baseline(rng)
    wbc, lymph = [w0], [l0]
    prev_t = 0.0
    for t in times:
        dt = t - prev_t
        wbc.append(spec.wbc.step(wbc[-1], w0, dt, rng))
        lymph.append(spec.lymph.step(lymph[-1], l0, dt, rng))
        prev_t = t
    return np.array(wbc), np.array(lymph)


def _draw_subject(spec: GenerativeSpec, index: int, binary: bool,
                  threshold_k: float | None):
    rng = np.random.default_rng([spec.seed, index])
    times = _visit_times(spec, rng)
    wbc, lymph = _covariate_paths(spec, times, rng)

    log10_cd4_0 = rng.normal(spec.log10_cd4_baseline_mean, spec.log10_cd4_baseline_sd)
    cd4_0 = float(np.clip(10.0 ** log10_cd4_0, *spec.cd4_baseline_range))
    baseline = Observation(time_months=0.0, cd4=cd4_0, wbc=float(wbc[0]),
                           lymph_pct=float(lymph[0]))

    # PSD square root via eigendecomposition; exact for singular D
    eigval, eigvec = np.linalg.eigh(spec.d_true)
    factor = eigvec * np.sqrt(np.clip(eigval, 0.0, None))
    b = factor @ rng.standard_normal(2)

    x = np.stack([design_row(t, wbc[j + 1], lymph[j + 1], baseline, spec.knot_months)
                  for j, t in enumerate(times)])
    z = np.stack([random_effects_row(t) for t in times])
    eta = x @ spec.beta_true + z @ b

    n_floored = 0
    obs = [baseline]
    if binary:
        theta = 1.0 / (1.0 + np.exp(-eta))
        y_plus = rng.uniform(size=len(times)) < theta
        cd4 = np.where(y_plus, 2.0 * threshold_k, 0.5 * threshold_k)
    else:
        cd4 = eta + np.sqrt(spec.sigma2_true) * rng.standard_normal(len(times))
        n_floored = int(np.sum(cd4 < spec.cd4_floor))
        cd4 = np.maximum(cd4, spec.cd4_floor)
    for j, t in enumerate(times):
        obs.append(Observation(time_months=float(t), cd4=float(cd4[j]),
                               wbc=float(wbc[j + 1]), lymph_pct=float(lymph[j + 1])))
    return Subject(id=f"s{index:04d}", observations=tuple(obs)), b, n_floored


def simulate(spec: GenerativeSpec, role_label: str = "learning"):
    """Draw a cohort from the continuous-outcome generative model.

    Returns ``(CohortDataset, true_b)`` where ``true_b`` maps subject id to
    its realized random-effects vector.  Deterministic for a fixed spec:
    each subject uses an RNG substream keyed by (seed, subject index).
    Generated CD4 values are floored at ``spec.cd4_floor`` to keep them
    positive; flooring events are counted and logged.
    """
    subjects, truth = [], {}
    total_floored = 0
    for i in range(spec.n_subjects):
        subj, b, n_floored = _draw_subject(spec, i, binary=False, threshold_k=None)
        subjects.append(subj)
        truth[subj.id] = b
        total_floored += n_floored
    if total_floored:
        log.warning("floored %d simulated cd4 values at %.1f", total_floored, spec.cd4_floor)
    return CohortDataset(subjects=tuple(subjects), role_label=role_label), truth


def simulate_binary(spec: GenerativeSpec, threshold_k: float,
                    role_label: str = "learning"):
    """Draw a cohort whose dichotomized response follows the logistic model.

    ``spec.beta_true`` and ``spec.d_true`` are interpreted on the logit
    scale.  Indicators are drawn from the logistic mixed model and encoded
    as CD4 values of 2K (above) or K/2 (below), so dichotomizing the
    returned cohort at ``threshold_k`` recovers exactly the drawn labels.
    Baseline CD4 is still drawn from the baseline distribution (it is a
    predictor, not a response).
    """
    if threshold_k <= 0:
        raise ValueError("threshold_k must be positive")
    subjects, truth = [], {}
    for i in range(spec.n_subjects):
        subj, b, _ = _draw_subject(spec, i, binary=True, threshold_k=threshold_k)
        subjects.append(subj)
        truth[subj.id] = b
    return CohortDataset(subjects=tuple(subjects), role_label=role_label), truth


def london_like_spec(n_subjects: int = 270, seed: int = 0, **overrides) -> GenerativeSpec:
    """Spec calibrated to the published cohort summaries (see module docs)."""
    return replace(GenerativeSpec(n_subjects=n_subjects, seed=seed), **overrides)
