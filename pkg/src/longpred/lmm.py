"""Linear mixed model fit by restricted maximum likelihood.

Model: for subject i with design matrices X_i (n_i x M) and Z_i (n_i x 2),

    y_i = X_i beta + Z_i b_i + eps_i,   b_i ~ N(0, D),  eps_i ~ N(0, sigma2 I)

so that marginally y_i ~ N(X_i beta, Sigma_i) with
Sigma_i = Z_i D Z_i^T + sigma2 I.

Estimation profiles beta out analytically: for any candidate (D, sigma2),
beta_hat is the GLS estimate and the restricted (REML) log-likelihood is a
function of the variance parameters alone.  The variance parameters are
optimized through a log-Cholesky parametrization

    D = L L^T,  L = [[exp(a), 0], [c, exp(b)]],  sigma2 = exp(s)

which is unconstrained, smooth, and keeps D positive semi-definite; a
derivative-free simplex search is followed by a quasi-Newton polish.  All
per-subject linear algebra goes through Cholesky factorizations of the
small n_i x n_i matrices Sigma_i (batched across subjects); no explicit
inverse of Sigma_i is ever formed.

Prediction support implements the standard mixed-model results:

    b_hat_i            = D Z_i^T Sigma_i^{-1} (y_i - X_i beta_hat)
    Var(beta_hat)      = [sum_i X_i^T Sigma_i^{-1} X_i]^{-1}
    Cov(beta_hat, b_hat_i - b_i) = -Var(beta_hat) X_i^T Sigma_i^{-1} Z_i D
    Var(b_hat_i - b_i) = D - D Z_i^T Sigma_i^{-1} Z_i D
                         + (D Z_i^T Sigma_i^{-1} X_i) Var(beta_hat)
                           (D Z_i^T Sigma_i^{-1} X_i)^T

and the prediction variance of a new observed value adds sigma2 on top of
the estimator variance (see ``prediction_variance``).  These forms avoid
inverting D, so they remain valid at a boundary fit where D is singular.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .cohort import COLUMN_NAMES, CohortDataset, DesignPair, stack_designs
from .errors import (
    ConditioningError,
    NonConvergenceError,
    SingularDesignError,
    SubjectError,
)

log = logging.getLogger(__name__)

LOG2PI = float(np.log(2.0 * np.pi))
_PARAM_CLIP = 45.0  # keeps exp() finite while letting boundaries be approached


@dataclass(frozen=True)
class LmmSettings:
    """Optimizer controls for the REML fit."""

    max_iter: int = 500
    rel_tol: float = 1e-10
    polish_max_iter: int = 200
    start: np.ndarray | None = None  # log-Cholesky (a, c, b, log sigma2)
    record_history: bool = False


@dataclass
class LmmFit:
    """REML estimates plus everything the prediction rules need."""

    beta_hat: np.ndarray
    d_hat: np.ndarray
    sigma2_hat: float
    var_beta_hat: np.ndarray
    reml_loglik: float
    converged: bool
    iterations: int
    knot_months: float = 1.0
    column_names: tuple[str, ...] = COLUMN_NAMES
    theta_hat: np.ndarray | None = None
    history: list[float] | None = None

    def __post_init__(self):
        self.beta_hat = np.asarray(self.beta_hat, dtype=float)
        self.d_hat = np.asarray(self.d_hat, dtype=float)
        self.var_beta_hat = np.asarray(self.var_beta_hat, dtype=float)
        if not np.allclose(self.d_hat, self.d_hat.T):
            raise ConditioningError("d_hat must be symmetric")
        if np.linalg.eigvalsh(self.d_hat).min() < -1e-8 * max(1.0, np.abs(self.d_hat).max()):
            raise ConditioningError("d_hat has a negative eigenvalue")
        if not self.sigma2_hat > 0:
            raise ConditioningError(f"sigma2_hat must be positive, got {self.sigma2_hat}")

    @property
    def n_fixed(self) -> int:
        return self.beta_hat.shape[0]


@dataclass
class BlupResult:
    """Random-effect prediction for one subject with its variance pieces."""

    b_hat: np.ndarray            # (2,)
    var_bhat_minus_b: np.ndarray  # (2, 2)
    cov_beta_bhat: np.ndarray    # (M, 2), Cov(beta_hat, b_hat - b)


def theta_to_chol_sigma2(theta: np.ndarray) -> tuple[np.ndarray, float]:
    """Map log-Cholesky parameters (a, c, b, s) to (L with D = L L', sigma2)."""
    a, c, b, s = np.clip(np.asarray(theta, dtype=float), -_PARAM_CLIP, _PARAM_CLIP)
    chol = np.array([[np.exp(a), 0.0], [c, np.exp(b)]])
    return chol, float(np.exp(s))


def theta_to_d_sigma2(theta: np.ndarray) -> tuple[np.ndarray, float]:
    """Map log-Cholesky parameters (a, c, b, s) to (D, sigma2)."""
    chol, sigma2 = theta_to_chol_sigma2(theta)
    return chol @ chol.T, sigma2


def d_sigma2_to_theta(d: np.ndarray, sigma2: float) -> np.ndarray:
    """Inverse of ``theta_to_d_sigma2`` (requires D strictly PD)."""
    chol = np.linalg.cholesky(np.asarray(d, dtype=float))
    return np.array([np.log(chol[0, 0]), chol[1, 0], np.log(chol[1, 1]), np.log(sigma2)])


class _PackedDesigns:
    """Subject designs padded to a common length for batched linear algebra.

    Fixed-effects columns are rescaled to unit root-mean-square internally;
    estimates are mapped back to the original scale when the fit finishes.
    Padded rows have zero design entries and response, and the padded
    diagonal of Sigma_i is pinned to one, so they contribute nothing to
    log-determinants or quadratic forms.
    """

    def __init__(self, designs: list[DesignPair], responses: list[np.ndarray],
                 column_names: tuple[str, ...] = COLUMN_NAMES):
        if len(designs) < 2:
            raise SubjectError("need at least 2 subjects to fit a mixed model")
        self.column_names = column_names
        if len(designs) != len(responses):
            raise SubjectError("designs and responses must align")
        sizes = []
        for pair, resp in zip(designs, responses):
            if pair.x.shape[0] != len(resp):
                raise SubjectError("response length must match design rows")
            sizes.append(pair.x.shape[0])
        self.n_subjects = len(designs)
        self.n_total = int(sum(sizes))
        self.n_fixed = designs[0].x.shape[1]
        nmax = max(sizes)

        self.x = np.zeros((self.n_subjects, nmax, self.n_fixed))
        self.z = np.zeros((self.n_subjects, nmax, 2))
        self.y = np.zeros((self.n_subjects, nmax))
        self.mask = np.zeros((self.n_subjects, nmax), dtype=bool)
        for i, (pair, resp) in enumerate(zip(designs, responses)):
            n = sizes[i]
            self.x[i, :n] = pair.x
            self.z[i, :n] = pair.z
            self.y[i, :n] = np.asarray(resp, dtype=float)
            self.mask[i, :n] = True

        stacked = self.x[self.mask]
        self.scale = np.sqrt(np.mean(stacked**2, axis=0))
        self.scale[self.scale < 1e-12] = 1.0
        self.x_scaled = self.x / self.scale
        # constant shift that converts the scaled-problem REML value back to
        # the original-scale value: log|A_orig| = log|A_scaled| + 2 sum log s
        self.logdet_shift = 2.0 * float(np.sum(np.log(self.scale)))
        self._eye = np.eye(nmax)
        self._mask_outer = (self.mask[:, :, None] & self.mask[:, None, :]).astype(float)
        self._pad_diag = (~self.mask)[:, None, :] * self._eye  # 1 on padded diagonal
        # flattened views for single-GEMM reductions; padded rows are zero
        self._rhs = np.concatenate([self.x_scaled, self.y[:, :, None]], axis=2)
        self._x2d = self.x_scaled.reshape(-1, self.n_fixed)
        self._y1d = self.y.reshape(-1)
        # cross-products for the factored (Woodbury) evaluation; padded rows
        # are zero so plain batched products are exact
        self._ztz = self.z.transpose(0, 2, 1) @ self.z          # (S, 2, 2)
        self._ztr = self.z.transpose(0, 2, 1) @ self._rhs       # (S, 2, M+1)
        self._rtr = np.einsum("snm,snp->mp", self._rhs, self._rhs)

        self.check_rank(stacked / self.scale, column_names)

    @staticmethod
    def check_rank(stacked_scaled: np.ndarray,
                   column_names: tuple[str, ...] = COLUMN_NAMES) -> None:
        n, m = stacked_scaled.shape
        if n < m:
            raise SingularDesignError(
                f"stacked design has {n} rows for {m} columns", dependent_columns=()
            )
        sv = np.linalg.svd(stacked_scaled, compute_uv=False)
        if sv[-1] < 1e-10 * sv[0]:
            _, _, piv = scipy.linalg.qr(stacked_scaled, pivoting=True, mode="economic")
            rank = int(np.sum(sv > 1e-10 * sv[0]))
            dep = sorted(piv[rank:].tolist())
            names = [column_names[j] if j < len(column_names) else f"col{j}" for j in dep]
            raise SingularDesignError(
                f"stacked design is rank deficient (rank {rank} of {m}); "
                f"dependent columns: {names}",
                dependent_columns=names,
            )

    def sigma_batch(self, d: np.ndarray, sigma2: float) -> np.ndarray:
        zd = self.z @ d
        v = zd @ self.z.transpose(0, 2, 1) + sigma2 * self._eye
        # neutralize padded rows/cols: off-diagonals are already zero
        v *= self._mask_outer
        v += self._pad_diag
        return v

    def gls_pieces(self, d: np.ndarray, sigma2: float):
        """Cholesky-based accumulation of the GLS building blocks.

        Returns (sum logdet Sigma_i, A = sum X' Sigma^-1 X,
        u = sum X' Sigma^-1 y, q = sum y' Sigma^-1 y) on the scaled design.
        """
        v = self.sigma_batch(d, sigma2)
        chol = np.linalg.cholesky(v)  # raises LinAlgError if not PD
        logdet = 2.0 * np.sum(np.log(np.einsum("sii->si", chol)))
        sol = np.linalg.solve(v, self._rhs)
        sol2d = sol.reshape(-1, self.n_fixed + 1)
        g = self._x2d.T @ sol2d  # [A | u] in one GEMM
        a, u = g[:, :-1], g[:, -1]
        q = float(self._y1d @ sol2d[:, -1])
        return float(logdet), a, u, q

    def gls_pieces_factored(self, chol_d: np.ndarray, sigma2: float):
        """Same quantities as ``gls_pieces`` via the rank-2 identity.

        With W = Z L (L the Cholesky factor of D) and M = sigma2 I + W'W,
        Sigma^-1 = (I - W M^-1 W') / sigma2 and
        log|Sigma| = (n - 2) log sigma2 + log|M|, so only 2x2
        factorizations are needed per evaluation.  Valid for singular D
        (L may have zero columns); used inside the optimizer loop.
        """
        m_mat = sigma2 * np.eye(2) + np.matmul(
            chol_d.T, np.matmul(self._ztz, chol_d))
        chol_m = np.linalg.cholesky(m_mat)
        logdet_m = 2.0 * float(np.sum(np.log(np.einsum("sii->si", chol_m))))
        logdet = (self.n_total - 2 * self.n_subjects) * np.log(sigma2) + logdet_m
        b = np.matmul(chol_d.T, self._ztr)                   # (S, 2, M+1)
        corr = np.einsum("sjm,sjp->mp", b, np.linalg.solve(m_mat, b))
        g = (self._rtr - corr) / sigma2
        a, u = g[:-1, :-1], g[:-1, -1]
        q = float(g[-1, -1])
        return float(logdet), a, u, q


def make_reml_objective(designs: list[DesignPair], responses: list[np.ndarray],
                        column_names: tuple[str, ...] = COLUMN_NAMES):
    """Profiled -2 * restricted log-likelihood as a function of theta.

    Returns ``(objective, packed)``; the objective takes the log-Cholesky
    parameter vector and returns the -2 REML criterion on the original
    column scale (beta profiled out analytically).  Exposed so tests can
    check stationarity of fitted points by finite differences.
    """
    packed = _PackedDesigns(designs, responses, column_names)

    def neg2_reml(theta: np.ndarray) -> float:
        chol_d, sigma2 = theta_to_chol_sigma2(theta)
        try:
            logdet, a, u, q = packed.gls_pieces_factored(chol_d, sigma2)
            cho = scipy.linalg.cho_factor(a)
            beta = scipy.linalg.cho_solve(cho, u)
            logdet_a = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            return np.inf
        quad = q - float(u @ beta)
        value = (
            logdet
            + logdet_a
            + packed.logdet_shift
            + quad
            + (packed.n_total - packed.n_fixed) * LOG2PI
        )
        return value if np.isfinite(value) else np.inf

    return neg2_reml, packed


def _default_start(packed: _PackedDesigns) -> np.ndarray:
    """Moment-style starting point: split OLS residual variance."""
    x = packed.x_scaled[packed.mask]
    y = packed.y[packed.mask]
    beta, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ beta
    v = float(np.var(resid)) or 1.0
    t = packed.z[packed.mask][:, 1]
    t2 = float(np.mean(t**2)) or 1.0
    d0 = np.array([[v / 2.0, 0.0], [0.0, v / (2.0 * t2)]])
    return d_sigma2_to_theta(d0, v / 2.0)


def fit_lmm_designs(designs: list[DesignPair], responses: list[np.ndarray],
                    settings: LmmSettings = LmmSettings(),
                    column_names: tuple[str, ...] = COLUMN_NAMES,
                    knot_months: float = 1.0) -> LmmFit:
    """REML fit on explicit per-subject designs (used by the extensions too)."""
    objective, packed = make_reml_objective(designs, responses, column_names)
    theta0 = np.asarray(settings.start, dtype=float) if settings.start is not None \
        else _default_start(packed)
    f0 = objective(theta0)
    if not np.isfinite(f0):
        raise NonConvergenceError("REML objective not finite at the starting point",
                                  last_params=theta0)

    history: list[float] = []

    def track(xk):
        history.append(objective(np.asarray(xk)))

    fatol = settings.rel_tol * max(1.0, abs(f0))
    nm = scipy.optimize.minimize(
        objective, theta0, method="Nelder-Mead",
        callback=track if settings.record_history else None,
        options={"maxiter": settings.max_iter, "fatol": fatol, "xatol": 1e-7},
    )
    gtol = 1e-9 * max(1.0, abs(f0))
    polish = scipy.optimize.minimize(
        objective, nm.x, method="BFGS", jac="3-point",
        callback=track if settings.record_history else None,
        options={"maxiter": settings.polish_max_iter, "gtol": gtol},
    )
    best = polish if polish.fun <= nm.fun else nm
    iterations = int(nm.nit + polish.nit)
    converged = bool(nm.success or polish.success)
    if not converged:
        raise NonConvergenceError(
            f"REML optimizer did not converge within {settings.max_iter} iterations",
            last_params=best.x, last_objective=float(best.fun),
        )

    theta_hat = np.asarray(best.x, dtype=float)
    d_hat, sigma2_hat = theta_to_d_sigma2(theta_hat)
    _, a, u, _ = packed.gls_pieces(d_hat, sigma2_hat)
    cho = scipy.linalg.cho_factor(a)
    beta_scaled = scipy.linalg.cho_solve(cho, u)
    var_scaled = scipy.linalg.cho_solve(cho, np.eye(packed.n_fixed))
    var_scaled = 0.5 * (var_scaled + var_scaled.T)

    beta_hat = beta_scaled / packed.scale
    var_beta = var_scaled / np.outer(packed.scale, packed.scale)
    return LmmFit(
        beta_hat=beta_hat,
        d_hat=d_hat,
        sigma2_hat=sigma2_hat,
        var_beta_hat=var_beta,
        reml_loglik=-0.5 * float(best.fun),
        converged=converged,
        iterations=iterations,
        knot_months=knot_months,
        column_names=tuple(column_names),
        theta_hat=theta_hat,
        history=history if settings.record_history else None,
    )


def fit_lmm(data: CohortDataset, knot_months: float = 1.0,
            settings: LmmSettings = LmmSettings()) -> LmmFit:
    """Fit the continuous-outcome mixed model to a cohort by REML."""
    designs, responses, _ = stack_designs(data, knot_months, outcome="continuous")
    return fit_lmm_designs(designs, responses, settings, knot_months=knot_months)


def _subject_sigma(fit: LmmFit, z: np.ndarray) -> np.ndarray:
    return z @ fit.d_hat @ z.T + fit.sigma2_hat * np.eye(z.shape[0])


def _warn_if_boundary(d: np.ndarray) -> None:
    eig = np.linalg.eigvalsh(d)
    if eig.min() < 1e-10 * max(eig.max(), 1.0):
        warnings.warn("d_hat is singular or nearly so (boundary fit); "
                      "random-effect predictions are degenerate in that direction",
                      RuntimeWarning, stacklevel=3)


def blup(fit: LmmFit, design: DesignPair, response: np.ndarray) -> BlupResult:
    """Random-effect prediction b_hat_i given a subject's observed responses.

    Also returns Var(b_hat - b) and Cov(beta_hat, b_hat - b), the pieces the
    interval rules need.  Valid at a boundary fit (singular D): the algebra
    below never inverts D.
    """
    if not fit.converged:
        raise NonConvergenceError("blup requires a converged fit")
    x, z = design.x, design.z
    response = np.asarray(response, dtype=float)
    if response.shape[0] != x.shape[0]:
        raise SubjectError("response length must match design rows")
    _warn_if_boundary(fit.d_hat)

    sigma = _subject_sigma(fit, z)
    cho = scipy.linalg.cho_factor(sigma)
    resid = response - x @ fit.beta_hat
    dzt = fit.d_hat @ z.T                          # (2, n)
    b_hat = dzt @ scipy.linalg.cho_solve(cho, resid)
    si_z = scipy.linalg.cho_solve(cho, z)          # Sigma^-1 Z
    si_x = scipy.linalg.cho_solve(cho, x)          # Sigma^-1 X
    t = dzt @ si_x                                 # (2, M) = D Z' Sigma^-1 X
    var_core = fit.d_hat - dzt @ si_z @ fit.d_hat
    var_bhat_minus_b = var_core + t @ fit.var_beta_hat @ t.T
    cov_beta_bhat = -fit.var_beta_hat @ t.T        # (M, 2)
    return BlupResult(
        b_hat=b_hat,
        var_bhat_minus_b=0.5 * (var_bhat_minus_b + var_bhat_minus_b.T),
        cov_beta_bhat=cov_beta_bhat,
    )


def predict_mean(fit: LmmFit, x_row: np.ndarray, z_row: np.ndarray,
                 b: np.ndarray) -> float:
    """Predicted response x beta_hat + z b for one design row."""
    x_row = np.asarray(x_row, dtype=float)
    z_row = np.asarray(z_row, dtype=float)
    b = np.asarray(b, dtype=float)
    if x_row.shape != (fit.n_fixed,) or z_row.shape != (2,) or b.shape != (2,):
        raise SubjectError(
            f"dimension mismatch: x {x_row.shape}, z {z_row.shape}, b {b.shape}"
        )
    return float(x_row @ fit.beta_hat + z_row @ b)


def prediction_variance(fit: LmmFit, x_row: np.ndarray, z_row: np.ndarray,
                        mode: str = "new_individual_simple",
                        blup_result: BlupResult | None = None) -> float:
    """Variance of (predicted - newly observed) response for one design row.

    Modes:

    - ``new_individual_simple``: x Var(beta_hat) x' + sigma2.  The random
      effect is set to zero and ignored in the variance (ordinary
      regression prediction variance).
    - ``new_individual_with_re``: x Var(beta_hat) x' + z D z' + sigma2.
      The random effect is still predicted as zero but its true dispersion
      is charged to the variance.
    - ``known_individual``: full form for a subject whose responses were
      observed, x Var(beta_hat) x' + z Var(b_hat-b) z'
      + 2 x Cov(beta_hat, b_hat-b) z' + sigma2 (``blup_result`` required).
    """
    if not fit.converged:
        raise NonConvergenceError("prediction_variance requires a converged fit")
    x_row = np.asarray(x_row, dtype=float)
    z_row = np.asarray(z_row, dtype=float)
    if mode == "new_individual_simple":
        var = float(x_row @ fit.var_beta_hat @ x_row) + fit.sigma2_hat
    elif mode == "new_individual_with_re":
        var = (float(x_row @ fit.var_beta_hat @ x_row)
               + float(z_row @ fit.d_hat @ z_row) + fit.sigma2_hat)
    elif mode == "known_individual":
        if blup_result is None:
            raise SubjectError("known_individual mode requires a BlupResult")
        var = (float(x_row @ fit.var_beta_hat @ x_row)
               + float(z_row @ blup_result.var_bhat_minus_b @ z_row)
               + 2.0 * float(x_row @ blup_result.cov_beta_bhat @ z_row)
               + fit.sigma2_hat)
    else:
        raise SubjectError(f"unknown prediction variance mode {mode!r}")
    if var <= 0 or not np.isfinite(var):
        raise ConditioningError(
            f"prediction variance {var} is not positive (mode {mode!r}); "
            "the fit is numerically ill-conditioned"
        )
    return var
