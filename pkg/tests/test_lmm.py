"""REML engine: estimates, BLUPs, prediction variance, and invariants.

Oracles: statsmodels MixedLM (independent REML implementation), dense
joint-Gaussian conditioning, and direct dense evaluations of the matrix
formulas using plain inverses (a different code path from the fitted
Cholesky solves).
"""

import warnings
from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg

from longpred.cohort import COLUMN_NAMES, build_design, stack_designs
from longpred.errors import (
    ConditioningError,
    NonConvergenceError,
    SingularDesignError,
    SubjectError,
)
from longpred.lmm import (
    LmmFit,
    LmmSettings,
    blup,
    d_sigma2_to_theta,
    fit_lmm,
    fit_lmm_designs,
    make_reml_objective,
    predict_mean,
    prediction_variance,
    theta_to_d_sigma2,
)
from longpred.simulate import london_like_spec, simulate
from tests.conftest import make_subject


def make_fit(beta, d, sigma2, var_beta=None, n_fixed=None):
    """Construct an LmmFit directly (for formula-level tests)."""
    beta = np.asarray(beta, dtype=float)
    m = n_fixed or beta.shape[0]
    return LmmFit(
        beta_hat=beta,
        d_hat=np.asarray(d, dtype=float),
        sigma2_hat=float(sigma2),
        var_beta_hat=np.zeros((m, m)) if var_beta is None else np.asarray(var_beta),
        reml_loglik=0.0,
        converged=True,
        iterations=0,
    )


class TestFitAgainstStatsmodels:
    @staticmethod
    def _statsmodels_fit(data):
        sm = pytest.importorskip("statsmodels.api")
        designs, responses, _ = stack_designs(data)
        x = np.vstack([d.x for d in designs])
        y = np.concatenate(responses)
        z = np.vstack([d.z for d in designs])
        groups = np.concatenate([[i] * len(r) for i, r in enumerate(responses)])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = sm.regression.mixed_linear_model.MixedLM(
                y, x, groups=groups, exog_re=z)
            return model.fit(reml=True, method="lbfgs", maxiter=500)

    def test_estimates_match(self):
        data, _ = simulate(london_like_spec(n_subjects=100, seed=7))
        fit = fit_lmm(data)
        ref = self._statsmodels_fit(data)
        denom = np.maximum(np.abs(ref.fe_params), 1e-3)
        assert np.max(np.abs(fit.beta_hat - ref.fe_params) / denom) < 1e-2
        np.testing.assert_allclose(fit.d_hat, np.asarray(ref.cov_re), rtol=2e-2)
        assert fit.sigma2_hat == pytest.approx(ref.scale, rel=2e-2)

    def test_optimum_at_least_as_good_as_statsmodels(self, sim_cohort, lmm_fit):
        data, _ = sim_cohort
        ref = self._statsmodels_fit(data)
        designs, responses, _ = stack_designs(data)
        objective, _ = make_reml_objective(designs, responses)
        ours = objective(lmm_fit.theta_hat)
        theirs = objective(d_sigma2_to_theta(np.asarray(ref.cov_re), ref.scale))
        assert ours <= theirs + 1e-4

    def test_reml_value_matches_dense_formula(self, sim_cohort, lmm_fit):
        # restricted log-likelihood recomputed from scratch with plain inverses
        data, _ = sim_cohort
        designs, responses, _ = stack_designs(data)
        d, s2 = lmm_fit.d_hat, lmm_fit.sigma2_hat
        logdet = 0.0
        a = np.zeros((12, 12))
        u = np.zeros(12)
        q = 0.0
        n = 0
        for pair, resp in zip(designs, responses):
            sigma = pair.z @ d @ pair.z.T + s2 * np.eye(len(resp))
            sigma_inv = np.linalg.inv(sigma)
            logdet += np.linalg.slogdet(sigma)[1]
            a += pair.x.T @ sigma_inv @ pair.x
            u += pair.x.T @ sigma_inv @ resp
            q += resp @ sigma_inv @ resp
            n += len(resp)
        beta = np.linalg.solve(a, u)
        neg2 = (logdet + np.linalg.slogdet(a)[1] + (q - u @ beta)
                + (n - 12) * np.log(2 * np.pi))
        assert lmm_fit.reml_loglik == pytest.approx(-0.5 * neg2, abs=1e-5)
        np.testing.assert_allclose(lmm_fit.beta_hat, beta, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(lmm_fit.var_beta_hat, np.linalg.inv(a),
                                   rtol=1e-6, atol=1e-12)


class TestDegenerateVariance:
    def test_zero_d_reaches_boundary_and_ols(self):
        spec = replace(london_like_spec(n_subjects=150, seed=21),
                       d_true=np.zeros((2, 2)), sigma2_true=900.0)
        data, _ = simulate(spec)
        fit = fit_lmm(data)
        eigs = np.linalg.eigvalsh(fit.d_hat)
        assert eigs.max() < 5e-2 * fit.sigma2_hat
        designs, responses, _ = stack_designs(data)
        x = np.vstack([d.x for d in designs])
        y = np.concatenate(responses)
        ols, *_ = np.linalg.lstsq(x, y, rcond=None)
        assert np.max(np.abs(fit.beta_hat - ols) / np.maximum(np.abs(ols), 1.0)) < 1e-2


class TestBlup:
    def test_zero_residual_gives_zero_blup(self, lmm_fit, sim_cohort):
        data, _ = sim_cohort
        pair, _ = build_design(data.subjects[0])
        synthetic = pair.x @ lmm_fit.beta_hat
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = blup(lmm_fit, pair, synthetic)
        np.testing.assert_allclose(result.b_hat, 0.0, atol=1e-9)

    def test_hand_sized_dense_evaluation(self):
        # 2-observation subject, all pieces recomputed with plain inverses
        beta = np.array([10.0, 2.0])
        d = np.array([[4.0, 0.5], [0.5, 1.0]])
        s2 = 2.0
        var_beta = np.array([[0.3, 0.05], [0.05, 0.2]])
        fit = make_fit(beta, d, s2, var_beta)
        x = np.array([[1.0, 3.0], [1.0, 5.0]])
        z = np.array([[1.0, 1.0], [1.0, 2.0]])
        y = np.array([20.0, 31.0])

        pair = type("P", (), {"x": x, "z": z})()
        result = blup(fit, pair, y)

        sigma = z @ d @ z.T + s2 * np.eye(2)
        sigma_inv = np.linalg.inv(sigma)
        b_direct = d @ z.T @ sigma_inv @ (y - x @ beta)
        np.testing.assert_allclose(result.b_hat, b_direct, rtol=1e-12)
        t = d @ z.T @ sigma_inv @ x
        var_direct = d - d @ z.T @ sigma_inv @ z @ d + t @ var_beta @ t.T
        np.testing.assert_allclose(result.var_bhat_minus_b, var_direct, rtol=1e-12)
        cov_direct = -var_beta @ t.T
        np.testing.assert_allclose(result.cov_beta_bhat, cov_direct, rtol=1e-12)

    def test_single_subject_conditioning_oracle(self):
        # with (D, sigma2) known and beta fixed, b_hat equals the conditional
        # mean of b | y from generic multivariate-normal conditioning
        rng = np.random.default_rng(5)
        d = np.array([[3.0, 0.8], [0.8, 1.5]])
        s2 = 1.7
        beta = rng.normal(size=4)
        fit = make_fit(beta, d, s2)
        x = rng.normal(size=(6, 4))
        z = np.column_stack([np.ones(6), np.arange(6.0)])
        y = rng.normal(size=6) + x @ beta

        pair = type("P", (), {"x": x, "z": z})()
        result = blup(fit, pair, y)

        # joint covariance of (b, y): [[D, D Z'], [Z D, Z D Z' + s2 I]]
        cov_by = d @ z.T
        cov_yy = z @ d @ z.T + s2 * np.eye(6)
        cond_mean = cov_by @ np.linalg.solve(cov_yy, y - x @ beta)
        np.testing.assert_allclose(result.b_hat, cond_mean, rtol=1e-10)
        cond_var = d - cov_by @ np.linalg.solve(cov_yy, cov_by.T)
        np.testing.assert_allclose(result.var_bhat_minus_b, cond_var,
                                   rtol=1e-10, atol=1e-12)

    def test_sigma_inflation_shrinks_blup(self, lmm_fit, sim_cohort):
        # 10x noise inflation shrinks every subject's prediction; in the
        # large-noise limit the prediction vanishes
        data, _ = sim_cohort
        for subj in data.subjects[:20]:
            pair, resp = build_design(subj)
            norms = []
            for inflate in (1.0, 10.0, 1e8):
                fit = make_fit(lmm_fit.beta_hat, lmm_fit.d_hat,
                               lmm_fit.sigma2_hat * inflate, lmm_fit.var_beta_hat)
                norms.append(np.linalg.norm(blup(fit, pair, resp).b_hat))
            assert norms[1] < norms[0]
            assert norms[2] < 1e-3 * norms[0]

    def test_boundary_d_warns(self, sim_cohort):
        data, _ = sim_cohort
        pair, resp = build_design(data.subjects[0])
        fit = make_fit(np.zeros(12), np.zeros((2, 2)), 1.0)
        with pytest.warns(RuntimeWarning, match="boundary"):
            result = blup(fit, pair, resp)
        np.testing.assert_allclose(result.b_hat, 0.0, atol=1e-12)

    def test_length_mismatch(self, lmm_fit, sim_cohort):
        data, _ = sim_cohort
        pair, resp = build_design(data.subjects[0])
        with pytest.raises(SubjectError):
            blup(lmm_fit, pair, resp[:-1])


class TestPredictMean:
    def test_zero_b_is_population_average(self, lmm_fit):
        x = np.arange(12.0)
        z = np.array([1.0, 2.0])
        assert predict_mean(lmm_fit, x, z, np.zeros(2)) == pytest.approx(
            float(x @ lmm_fit.beta_hat))

    def test_intercept_shift_linearity(self, lmm_fit):
        x = np.ones(12)
        z = np.array([1.0, 4.0])
        base = predict_mean(lmm_fit, x, z, np.zeros(2))
        shifted = predict_mean(lmm_fit, x, z, np.array([7.5, 0.0]))
        assert shifted - base == pytest.approx(7.5, abs=1e-10)

    def test_continuity_across_knot(self, lmm_fit):
        subj = make_subject("c", [0.0, 1.0 - 1e-9, 1.0 + 1e-9], [150, 150, 150])
        pair, _ = build_design(subj)
        below = predict_mean(lmm_fit, pair.x[0], pair.z[0], np.zeros(2))
        above = predict_mean(lmm_fit, pair.x[1], pair.z[1], np.zeros(2))
        assert abs(above - below) < 1e-5

    def test_dimension_mismatch(self, lmm_fit):
        with pytest.raises(SubjectError):
            predict_mean(lmm_fit, np.ones(5), np.ones(2), np.zeros(2))


class TestPredictionVariance:
    def test_noise_floor_in_every_mode(self):
        fit = make_fit(np.zeros(3), np.zeros((2, 2)), 2.5)
        x = np.array([1.0, 2.0, 3.0])
        z = np.array([1.0, 4.0])
        for mode in ("new_individual_simple", "new_individual_with_re"):
            assert prediction_variance(fit, x, z, mode) == pytest.approx(2.5)
        br = type("B", (), {"b_hat": np.zeros(2),
                            "var_bhat_minus_b": np.zeros((2, 2)),
                            "cov_beta_bhat": np.zeros((3, 2))})()
        assert prediction_variance(fit, x, z, "known_individual", br) == pytest.approx(2.5)

    def test_with_re_dominates_simple(self, lmm_fit):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = rng.normal(size=12)
            z = np.array([1.0, rng.uniform(0, 30)])
            simple = prediction_variance(lmm_fit, x, z, "new_individual_simple")
            with_re = prediction_variance(lmm_fit, x, z, "new_individual_with_re")
            assert with_re >= simple

    def test_full_mode_formula(self, lmm_fit, sim_cohort):
        data, _ = sim_cohort
        pair, resp = build_design(data.subjects[2])
        br = blup(lmm_fit, pair, resp)
        x, z = pair.x[0], pair.z[0]
        direct = (x @ lmm_fit.var_beta_hat @ x
                  + z @ br.var_bhat_minus_b @ z
                  + 2.0 * x @ br.cov_beta_bhat @ z
                  + lmm_fit.sigma2_hat)
        assert prediction_variance(lmm_fit, x, z, "known_individual", br) == \
            pytest.approx(direct, rel=1e-12)

    def test_negative_variance_raises(self):
        fit = make_fit(np.zeros(2), np.zeros((2, 2)), 1.0,
                       var_beta=np.array([[-100.0, 0.0], [0.0, -100.0]]))
        with pytest.raises(ConditioningError):
            prediction_variance(fit, np.array([1.0, 1.0]), np.array([1.0, 0.0]),
                                "new_individual_simple")

    def test_unknown_mode(self, lmm_fit):
        with pytest.raises(SubjectError):
            prediction_variance(lmm_fit, np.ones(12), np.ones(2), "bogus")


class TestRemlInvariants:
    def test_history_non_increasing(self, sim_cohort):
        data, _ = sim_cohort
        fit = fit_lmm(data, settings=LmmSettings(record_history=True))
        h = np.array(fit.history)
        assert h.size > 0
        assert np.all(np.diff(h) <= 1e-6 * np.maximum(1.0, np.abs(h[:-1])))

    def test_stationarity_by_central_differences(self, sim_cohort, lmm_fit):
        data, _ = sim_cohort
        designs, responses, _ = stack_designs(data)
        objective, _ = make_reml_objective(designs, responses)
        theta = lmm_fit.theta_hat
        for h in (1e-5, 2e-5):
            grad = np.array([
                (objective(theta + h * e) - objective(theta - h * e)) / (2 * h)
                for e in np.eye(4)
            ])
            assert np.abs(grad).max() < 5e-3

    def test_reparametrization_restarts_reach_same_optimum(self, sim_cohort, lmm_fit):
        data, _ = sim_cohort
        rng = np.random.default_rng(77)
        values = [fit_lmm(data, settings=LmmSettings(
            start=lmm_fit.theta_hat + rng.uniform(-1.0, 1.0, size=4))).reml_loglik
            for _ in range(5)]
        assert max(values) - min(values) < 1e-6
        assert abs(values[0] - lmm_fit.reml_loglik) < 1e-6

    def test_subject_sigmas_positive_definite(self, sim_cohort, lmm_fit):
        data, _ = sim_cohort
        designs, _, _ = stack_designs(data)
        for pair in designs:
            sigma = pair.z @ lmm_fit.d_hat @ pair.z.T + \
                lmm_fit.sigma2_hat * np.eye(pair.z.shape[0])
            scipy.linalg.cholesky(sigma)  # raises if not PD

    def test_blup_identities(self, sim_cohort, lmm_fit):
        # GLS normal equations and the per-subject Henderson identity
        data, _ = sim_cohort
        designs, responses, _ = stack_designs(data)
        score = np.zeros(12)
        scale = 0.0
        for pair, resp in zip(designs, responses):
            sigma = pair.z @ lmm_fit.d_hat @ pair.z.T + \
                lmm_fit.sigma2_hat * np.eye(len(resp))
            resid = resp - pair.x @ lmm_fit.beta_hat
            si_r = np.linalg.solve(sigma, resid)
            score += pair.x.T @ si_r
            scale += np.abs(pair.x.T @ np.abs(si_r)).max()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                br = blup(lmm_fit, pair, resp)
            lhs = lmm_fit.d_hat @ pair.z.T @ (resid - pair.z @ br.b_hat)
            rhs = lmm_fit.sigma2_hat * br.b_hat
            np.testing.assert_allclose(lhs, rhs, rtol=1e-8, atol=1e-8)
        assert np.abs(score).max() < 1e-8 * max(scale, 1.0)

    def test_factored_path_matches_dense(self, sim_cohort):
        data, _ = sim_cohort
        designs, responses, _ = stack_designs(data)
        _, packed = make_reml_objective(designs, responses)
        d = np.array([[2000.0, 30.0], [30.0, 12.0]])
        s2 = 1500.0
        ld_a, a_a, u_a, q_a = packed.gls_pieces(d, s2)
        ld_b, a_b, u_b, q_b = packed.gls_pieces_factored(np.linalg.cholesky(d), s2)
        assert ld_a == pytest.approx(ld_b, abs=1e-8)
        np.testing.assert_allclose(a_a, a_b, rtol=1e-10)
        np.testing.assert_allclose(u_a, u_b, rtol=1e-10)
        assert q_a == pytest.approx(q_b, rel=1e-10)

    def test_theta_roundtrip(self):
        d = np.array([[5.0, 1.0], [1.0, 2.0]])
        theta = d_sigma2_to_theta(d, 3.0)
        d2, s2 = theta_to_d_sigma2(theta)
        np.testing.assert_allclose(d, d2, rtol=1e-14)
        assert s2 == pytest.approx(3.0, rel=1e-14)


class TestFitErrors:
    def test_rank_deficiency_names_columns(self):
        # lymph% identical to wbc at every visit makes the columns dependent
        subjects = []
        rng = np.random.default_rng(3)
        for i in range(10):
            times = [0.0, 1.0, 2.0, 5.0]
            wbc = [float(w) for w in rng.uniform(3, 8, size=4)]
            subjects.append(make_subject(
                f"s{i}", times, [float(c) for c in rng.uniform(100, 400, size=4)],
                wbc=wbc, lymph=wbc))
        designs, responses = [], []
        for s in subjects:
            pair, resp = build_design(s)
            designs.append(pair)
            responses.append(resp)
        with pytest.raises(SingularDesignError) as exc:
            fit_lmm_designs(designs, responses)
        assert exc.value.dependent_columns

    def test_iteration_cap_raises_with_last_iterate(self, sim_cohort):
        data, _ = sim_cohort
        bad = LmmSettings(max_iter=2, polish_max_iter=1,
                          start=np.array([5.0, 4.0, 5.0, 12.0]))
        with pytest.raises(NonConvergenceError) as exc:
            fit_lmm(data, settings=bad)
        assert exc.value.last_params is not None

    def test_needs_two_subjects(self, sim_cohort):
        data, _ = sim_cohort
        pair, resp = build_design(data.subjects[0])
        with pytest.raises(SubjectError):
            fit_lmm_designs([pair], [resp])
