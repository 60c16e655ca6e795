"""Shared fixtures: small simulated cohorts and fits reused across modules."""

import logging
from dataclasses import replace

import numpy as np
import pytest

from longpred.cohort import CohortDataset, Observation, Subject
from longpred.glmm import fit_glmm
from longpred.lmm import fit_lmm
from longpred.simulate import london_like_spec, simulate, simulate_binary

logging.getLogger("longpred").setLevel(logging.ERROR)


def make_subject(sid, times, cd4, wbc=None, lymph=None):
    """Hand-built subject; wbc/lymph default to constants."""
    n = len(times)
    wbc = wbc if wbc is not None else [5.0] * n
    lymph = lymph if lymph is not None else [25.0] * n
    obs = tuple(
        Observation(time_months=float(t), cd4=float(c), wbc=float(w), lymph_pct=float(l))
        for t, c, w, l in zip(times, cd4, wbc, lymph)
    )
    return Subject(id=sid, observations=obs)


# logit-scale parameters for cohorts whose dichotomized response truly
# follows the logistic mixed model (most interactions zero keeps the
# surface well conditioned at small sample sizes)
BINARY_BETA = np.array([-7.0, 3.1, 0.10, 0.020, 0.50, -0.45,
                        0.08, 0.015, 0.0, 0.0, 0.0, 0.0])
BINARY_D = np.array([[0.5, 0.02], [0.02, 0.006]])


def binary_spec(n_subjects, seed):
    return replace(
        london_like_spec(n_subjects=n_subjects, seed=seed),
        beta_true=BINARY_BETA, d_true=BINARY_D,
    )


@pytest.fixture(scope="session")
def sim_cohort():
    data, truth = simulate(london_like_spec(n_subjects=60, seed=42))
    return data, truth


@pytest.fixture(scope="session")
def lmm_fit(sim_cohort):
    data, _ = sim_cohort
    return fit_lmm(data)


@pytest.fixture(scope="session")
def cohort_pair():
    learning, _ = simulate(london_like_spec(n_subjects=60, seed=7), role_label="learning")
    test, _ = simulate(london_like_spec(n_subjects=50, seed=8), role_label="test")
    return learning, test


@pytest.fixture(scope="session")
def binary_cohort():
    data, truth = simulate_binary(binary_spec(40, seed=3), threshold_k=200.0)
    return data, truth


@pytest.fixture(scope="session")
def glmm_fit(binary_cohort):
    data, _ = binary_cohort
    return fit_glmm(data, threshold_k=200.0)
