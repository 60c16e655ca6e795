"""Generative model: determinism, calibration, and moment checks."""

from dataclasses import replace

import numpy as np
import pytest

from longpred.cohort import build_design, save_cohort
from longpred.simulate import (
    CovariateProcess,
    GenerativeSpec,
    london_like_spec,
    simulate,
    simulate_binary,
)


def frozen_covariates(spec):
    """Covariates pinned to their baselines (no within-subject evolution)."""
    return replace(
        spec,
        wbc=replace(spec.wbc, stationary_sd=0.0),
        lymph=replace(spec.lymph, stationary_sd=0.0),
    )


class TestDeterminism:
    def test_same_seed_byte_identical(self, tmp_path):
        spec = london_like_spec(n_subjects=20, seed=123)
        d1, t1 = simulate(spec)
        d2, t2 = simulate(spec)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        save_cohort(d1, p1)
        save_cohort(d2, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for sid in t1:
            assert np.array_equal(t1[sid], t2[sid])

    def test_different_seed_differs(self):
        d1, _ = simulate(london_like_spec(n_subjects=5, seed=1))
        d2, _ = simulate(london_like_spec(n_subjects=5, seed=2))
        assert d1.subjects[0].observations != d2.subjects[0].observations

    def test_subject_substreams_stable_under_cohort_size(self):
        # subject i's draw must not depend on how many subjects follow it
        d1, _ = simulate(london_like_spec(n_subjects=3, seed=9))
        d2, _ = simulate(london_like_spec(n_subjects=10, seed=9))
        assert d1.subjects[2].observations == d2.subjects[2].observations


class TestGenerativeModel:
    def test_noiseless_is_piecewise_linear(self):
        spec = frozen_covariates(replace(
            london_like_spec(n_subjects=8, seed=0),
            sigma2_true=0.0, d_true=np.zeros((2, 2)),
        ))
        data, _ = simulate(spec)
        for subj in data.subjects:
            pair, resp = build_design(subj, spec.knot_months)
            np.testing.assert_allclose(resp, pair.x @ spec.beta_true, rtol=1e-12)
            # slopes constant on each side of the knot
            t = np.array([o.time_months for o in subj.post_baseline])
            y = np.array([o.cd4 for o in subj.post_baseline])
            for side in (t < spec.knot_months, t > spec.knot_months):
                if side.sum() >= 3:
                    slopes = np.diff(y[side]) / np.diff(t[side])
                    np.testing.assert_allclose(slopes, slopes[0], rtol=1e-8)

    def test_truth_matches_generation(self):
        spec = frozen_covariates(replace(
            london_like_spec(n_subjects=10, seed=4), sigma2_true=0.0))
        data, truth = simulate(spec)
        for subj in data.subjects:
            pair, resp = build_design(subj, spec.knot_months)
            expected = pair.x @ spec.beta_true + pair.z @ truth[subj.id]
            if np.all(expected >= spec.cd4_floor):
                np.testing.assert_allclose(resp, expected, rtol=1e-10)

    def test_london_calibration_median_baseline(self):
        data, _ = simulate(london_like_spec(n_subjects=270, seed=0))
        baselines = [s.baseline.cd4 for s in data.subjects]
        assert 114 < np.median(baselines) < 333

    def test_followup_summaries_plausible(self):
        data, _ = simulate(london_like_spec(n_subjects=270, seed=1))
        n_visits = [len(s.post_baseline) for s in data.subjects]
        followup = [s.observations[-1].time_months for s in data.subjects]
        assert 6 <= np.median(n_visits) <= 12
        assert all(2 <= n <= 24 for n in n_visits)
        assert 18 <= np.median(followup) <= 33

    def test_conditional_variance_moment(self):
        # mean of (cd4 - x beta)^2 / (z D z' + sigma2) over ~1e5 records is 1
        spec = replace(
            london_like_spec(n_subjects=11000, seed=6),
            log10_cd4_baseline_mean=2.65,  # keeps the floor out of play
        )
        data, _ = simulate(spec)
        ratios = []
        for subj in data.subjects:
            pair, resp = build_design(subj, spec.knot_months)
            keep = resp > spec.cd4_floor
            e = resp[keep] - pair.x[keep] @ spec.beta_true
            v = (np.einsum("nj,jk,nk->n", pair.z[keep], spec.d_true, pair.z[keep])
                 + spec.sigma2_true)
            ratios.append(e * e / v)
        ratios = np.concatenate(ratios)
        assert ratios.size > 1e5
        assert abs(ratios.mean() - 1.0) < 0.02

    def test_within_subject_residual_correlation_positive(self):
        data, _ = simulate(london_like_spec(n_subjects=800, seed=13))
        cross = []
        for subj in data.subjects:
            pair, resp = build_design(subj)
            e = resp - pair.x @ london_like_spec().beta_true
            if len(e) >= 2:
                prod = np.outer(e, e)
                cross.append(prod[np.triu_indices_from(prod, k=1)].mean())
        assert np.mean(cross) > 0

    def test_floor_applied_and_logged(self, caplog):
        spec = replace(london_like_spec(n_subjects=80, seed=2),
                       log10_cd4_baseline_mean=1.7)  # low cohort, flooring certain
        with caplog.at_level("WARNING", logger="longpred.simulate"):
            data, _ = simulate(spec)
        cd4 = np.array([o.cd4 for s in data.subjects for o in s.post_baseline])
        assert cd4.min() >= spec.cd4_floor
        assert (cd4 == spec.cd4_floor).any()
        assert any("floored" in r.message for r in caplog.records)


class TestBinary:
    def test_labels_encoded_exactly(self, binary_cohort):
        data, _ = binary_cohort
        for subj in data.subjects:
            for o in subj.post_baseline:
                assert o.cd4 in (100.0, 400.0)  # K/2 or 2K at K = 200

    def test_class_balance_reasonable(self, binary_cohort):
        data, _ = binary_cohort
        y = np.array([o.cd4 > 200 for s in data.subjects for o in s.post_baseline])
        assert 0.2 < y.mean() < 0.95

    def test_rejects_bad_threshold(self):
        with pytest.raises(ValueError):
            simulate_binary(london_like_spec(n_subjects=3, seed=0), threshold_k=0.0)


class TestSpecValidation:
    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            GenerativeSpec(beta_true=np.zeros(5))
        with pytest.raises(ValueError):
            GenerativeSpec(d_true=np.array([[1.0, 2.0], [0.0, 1.0]]))
        with pytest.raises(ValueError):
            GenerativeSpec(sigma2_true=-1.0)
        with pytest.raises(ValueError):
            GenerativeSpec(n_subjects=0)

    def test_covariates_respect_bounds(self):
        proc = CovariateProcess(baseline_mean=5.0, baseline_sd=50.0,
                                stationary_sd=30.0, autocorr_per_month=0.5,
                                lower=0.5, upper=20.0)
        spec = replace(london_like_spec(n_subjects=40, seed=3), wbc=proc)
        data, _ = simulate(spec)
        w = [o.wbc for s in data.subjects for o in s.observations]
        assert min(w) >= 0.5 and max(w) <= 20.0
