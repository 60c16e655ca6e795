"""Logistic mixed model for dichotomized responses.

Model: indicator responses y_ij with

    P(y_ij = 1 | b_i) = expit(x_ij beta + z_ij b_i),   b_i ~ N(0, D)

fit by maximizing an approximation to the marginal likelihood.  The
per-subject integral over the 2-D random effect is approximated by
adaptive Gauss-Hermite quadrature centered at the posterior mode of b_i
and scaled by the curvature there; with a single node per dimension this
is exactly the Laplace approximation, which is the default (tensor
quadrature over two dimensions gets expensive quickly, so higher node
counts are mainly used for verification).

The inner problem (posterior mode per subject) is a globally convergent
Newton iteration with step halving, batched across subjects.  The outer
problem optimizes (beta, log-Cholesky of D) by quasi-Newton with numeric
gradients; fixed-effects columns and the random-effects time column are
rescaled internally for conditioning and mapped back on exit.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.optimize
from scipy.special import expit, logsumexp

from .cohort import COLUMN_NAMES, CohortDataset, DesignPair, stack_designs
from .errors import NonConvergenceError, SeparationError, SubjectError

log = logging.getLogger(__name__)

LOG2PI = float(np.log(2.0 * np.pi))
_THETA_HI = float(np.nextafter(1.0, 0.0))
_THETA_LO = 1e-300


@dataclass(frozen=True)
class IntegrationSpec:
    """How the random-effect integral is approximated."""

    method: str = "laplace"          # "laplace" or "adaptive_gh"
    nodes_per_dim: int = 1

    def __post_init__(self):
        if self.method not in ("laplace", "adaptive_gh"):
            raise ValueError(f"unknown integration method {self.method!r}")
        if self.nodes_per_dim < 1:
            raise ValueError("nodes_per_dim must be >= 1")

    @property
    def effective_nodes(self) -> int:
        return 1 if self.method == "laplace" else self.nodes_per_dim


@dataclass(frozen=True)
class GlmmSettings:
    max_iter: int = 500
    gtol: float = 1e-6
    integration: IntegrationSpec = IntegrationSpec()
    constrain_d_to_zero: bool = False
    start_beta: np.ndarray | None = None


@dataclass
class GlmmFit:
    """Logistic mixed model estimates and integration metadata."""

    beta_hat: np.ndarray
    d_hat: np.ndarray
    marginal_loglik: float
    integration: IntegrationSpec
    converged: bool
    iterations: int = 0
    threshold_k: float | None = None
    knot_months: float = 1.0
    column_names: tuple[str, ...] = COLUMN_NAMES

    def __post_init__(self):
        self.beta_hat = np.asarray(self.beta_hat, dtype=float)
        self.d_hat = np.asarray(self.d_hat, dtype=float)
        if not np.allclose(self.d_hat, self.d_hat.T):
            raise ValueError("d_hat must be symmetric")
        if np.linalg.eigvalsh(self.d_hat).min() < -1e-10 * max(1.0, np.abs(self.d_hat).max()):
            raise ValueError("d_hat must be positive semi-definite")


def predict_theta(fit: GlmmFit, x_row: np.ndarray, z_row: np.ndarray,
                  b: np.ndarray) -> float:
    """Predicted probability expit(x beta + z b), overflow-safe, in (0, 1)."""
    if not fit.converged:
        raise NonConvergenceError("predict_theta requires a converged fit")
    eta = float(np.asarray(x_row) @ fit.beta_hat + np.asarray(z_row) @ np.asarray(b))
    return float(np.clip(expit(eta), _THETA_LO, _THETA_HI))


def predict_theta_batch(fit: GlmmFit, x: np.ndarray, z: np.ndarray,
                        b: np.ndarray) -> np.ndarray:
    eta = x @ fit.beta_hat + z @ np.asarray(b)
    return np.clip(expit(eta), _THETA_LO, _THETA_HI)


def check_separation(designs: list[DesignPair], responses: list[np.ndarray],
                     column_names: tuple[str, ...] = COLUMN_NAMES) -> None:
    """Raise SeparationError for single-class data or a separating column."""
    y = np.concatenate([np.asarray(r) for r in responses])
    if y.size == 0:
        raise SubjectError("no responses to fit")
    if y.min() == y.max():
        raise SeparationError(
            f"all responses are in class {int(y[0])}; both classes are required"
        )
    x = np.vstack([d.x for d in designs])
    pos, neg = x[y == 1], x[y == 0]
    for j in range(x.shape[1]):
        col_pos, col_neg = pos[:, j], neg[:, j]
        if np.ptp(x[:, j]) < 1e-12:
            continue
        if col_pos.min() > col_neg.max() or col_neg.min() > col_pos.max():
            name = column_names[j] if j < len(column_names) else f"col{j}"
            raise SeparationError(
                f"design column {name!r} perfectly separates the classes"
            )


class _PackedBinary:
    """Padded per-subject binary designs in an orthonormalized column basis.

    Fixed-effects columns are replaced internally by an orthonormal basis
    (thin QR of the stacked design, rescaled to unit RMS); this is an exact
    reparametrization that keeps the outer optimization well conditioned.
    ``to_internal``/``from_internal`` convert coefficient vectors between
    the original column basis and the internal one.
    """

    def __init__(self, designs, responses):
        sizes = [d.x.shape[0] for d in designs]
        self.n_subjects = len(designs)
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
        flat_z = self.z[self.mask]
        self.z_scale = np.sqrt(np.mean(flat_z**2, axis=0))
        self.z_scale[self.z_scale < 1e-12] = 1.0
        self.zs = self.z / self.z_scale

        flat_x = self.x[self.mask]
        n_obs = flat_x.shape[0]
        q, r = np.linalg.qr(flat_x)
        # fix QR sign ambiguity for reproducibility across BLAS variants
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        q *= signs
        r = signs[:, None] * r
        self._t = r / np.sqrt(n_obs)  # x = (q sqrt(n)) @ t, q sqrt(n) unit-RMS
        self.xs = np.zeros_like(self.x)
        self.xs[self.mask] = q * np.sqrt(n_obs)

    def to_internal(self, beta_original: np.ndarray) -> np.ndarray:
        return self._t @ np.asarray(beta_original, dtype=float)

    def from_internal(self, beta_internal: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self._t, np.asarray(beta_internal, dtype=float))


def _bernoulli_loglik(eta, y, mask):
    """Sum over visits of y*eta - log(1 + exp(eta)), padded entries masked."""
    return np.sum(mask * (y * eta - np.logaddexp(0.0, eta)), axis=-1)


def _posterior_modes(xs, zs, y, mask, beta, d_inv, b0=None,
                     max_iter=60, tol=1e-5, n_polish=2):
    """Batched Newton maximization of log p(y | b) + log N(b; 0, D).

    Returns (modes, neg_hessians, objective_at_mode, converged_mask) where
    the objective excludes the prior normalizing constant.

    Convergence is on the Newton step norm, and the loop always finishes
    with ``n_polish`` unconditional full Newton steps.  The polish makes
    the returned mode the Newton fixed point to machine precision no
    matter where the iteration started, so warm-started evaluations are
    path-independent; this matters because the Laplace objective is
    first-order sensitive to mode error through its log-determinant term.
    """
    s = xs.shape[0]
    offset = np.einsum("snm,m->sn", xs, beta)
    b = np.zeros((s, 2)) if b0 is None else b0.copy()

    def objective(bcur):
        eta = offset + np.einsum("snq,sq->sn", zs, bcur)
        quad = 0.5 * np.einsum("sq,qp,sp->s", bcur, d_inv, bcur)
        return _bernoulli_loglik(eta, y, mask) - quad

    def grad_hess(bcur):
        eta = offset + np.einsum("snq,sq->sn", zs, bcur)
        theta = expit(eta)
        w = mask * theta * (1.0 - theta)
        grad = np.einsum("snq,sn->sq", zs, mask * (y - theta)) - bcur @ d_inv.T
        hess = np.einsum("snq,sn,snp->sqp", zs, w, zs) + d_inv
        return grad, hess

    obj = objective(b)
    converged = np.zeros(s, dtype=bool)
    for _ in range(max_iter):
        grad, h = grad_hess(b)
        step = np.linalg.solve(h, grad[:, :, None])[:, :, 0]
        converged = np.abs(step).max(axis=1) < tol * (1.0 + np.abs(b).max(axis=1))
        if converged.all():
            break
        t = np.ones(s)
        for _ in range(12):
            cand = b + t[:, None] * step
            cand_obj = objective(cand)
            worse = cand_obj < obj - 1e-12
            if not worse.any():
                break
            t[worse] *= 0.5
        improved = cand_obj >= obj
        b = np.where(improved[:, None], cand, b)
        obj = np.where(improved, cand_obj, obj)
    for _ in range(n_polish):
        grad, h = grad_hess(b)
        b = b + np.linalg.solve(h, grad[:, :, None])[:, :, 0]
    grad, h = grad_hess(b)
    return b, h, objective(b), converged


def _gh_nodes(nodes_per_dim: int):
    """Tensor-product Gauss-Hermite nodes/log-weights for 2 dimensions."""
    u, w = np.polynomial.hermite.hermgauss(nodes_per_dim)
    uu = np.array([(a, c) for a in u for c in u])
    logw = np.array([np.log(wa) + np.log(wc) for wa in w for wc in w])
    return uu, logw


def _marginal_loglik_packed(packed: _PackedBinary, beta_s, d_s, nodes_per_dim,
                            modes0=None):
    """Total approximate marginal log-likelihood on the scaled problem."""
    sign, logdet_d = np.linalg.slogdet(d_s)
    if sign <= 0:
        return -np.inf, None
    d_inv = np.linalg.inv(d_s)
    modes, h, obj, _ = _posterior_modes(packed.xs, packed.zs, packed.y,
                                        packed.mask, beta_s, d_inv, b0=modes0)
    # prior constant for q = 2: -log(2*pi) - 0.5 log|D|
    joint_at = obj - LOG2PI - 0.5 * logdet_d

    lh = np.linalg.cholesky(h)
    # C with H^-1 = C C^T and |C| = |H|^(-1/2), from the 2x2 Cholesky factor
    l11, l21, l22 = lh[:, 0, 0], lh[:, 1, 0], lh[:, 1, 1]
    c = np.zeros_like(lh)
    c[:, 0, 0] = 1.0 / l11
    c[:, 0, 1] = -l21 / (l11 * l22)
    c[:, 1, 1] = 1.0 / l22
    logdet_c = -np.log(l11) - np.log(l22)

    if nodes_per_dim == 1:
        per_subject = joint_at + np.log(2.0 * np.pi) + logdet_c
        return float(np.sum(per_subject)), modes

    uu, logw = _gh_nodes(nodes_per_dim)
    b_nodes = modes[:, None, :] + np.sqrt(2.0) * np.einsum("sij,mj->smi", c, uu)
    eta = (np.einsum("snm,m->sn", packed.xs, beta_s)[:, None, :]
           + np.einsum("snq,smq->smn", packed.zs, b_nodes))
    ll = _bernoulli_loglik(eta, packed.y[:, None, :], packed.mask[:, None, :])
    quad = 0.5 * np.einsum("smq,qp,smp->sm", b_nodes, d_inv, b_nodes)
    joint = ll - quad - LOG2PI - 0.5 * logdet_d
    usq = np.sum(uu**2, axis=1)
    per_subject = logsumexp(joint + usq[None, :] + logw[None, :], axis=1)
    per_subject += np.log(2.0) + logdet_c
    return float(np.sum(per_subject)), modes


def glmm_marginal_loglik(designs, responses, beta, d,
                         method: str = "adaptive_gh", nodes_per_dim: int = 7) -> float:
    """Approximate marginal log-likelihood at given (beta, D).

    Useful for verifying node-count convergence of the quadrature or
    comparing against independent integration.
    """
    spec = IntegrationSpec(method=method, nodes_per_dim=nodes_per_dim)
    packed = _PackedBinary(designs, responses)
    beta_i = packed.to_internal(beta)
    d_s = np.diag(packed.z_scale) @ np.asarray(d, dtype=float) @ np.diag(packed.z_scale)
    value, _ = _marginal_loglik_packed(packed, beta_i, d_s, spec.effective_nodes)
    return value


def _irls_logistic(x, y, ridge=1e-9, max_iter=100, tol=1e-12):
    """Pooled logistic regression by IRLS Newton; returns (beta, loglik, ok)."""
    beta = np.zeros(x.shape[1])
    ok = False
    for _ in range(max_iter):
        eta = x @ beta
        mu = expit(eta)
        grad = x.T @ (y - mu) - ridge * beta
        w = mu * (1.0 - mu) + 1e-12
        hess = (x * w[:, None]).T @ x + ridge * np.eye(x.shape[1])
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if np.abs(grad).max() < tol * (1.0 + np.abs(beta).max()):
            ok = True
            break
    loglik = float(np.sum(y * (x @ beta) - np.logaddexp(0.0, x @ beta)))
    return beta, loglik, ok


def _chol_params_to_d(p):
    a, c, b = np.clip(p, -40.0, 40.0)
    l = np.array([[np.exp(a), 0.0], [c, np.exp(b)]])
    return l @ l.T


def fit_glmm(data: CohortDataset, threshold_k: float, knot_months: float = 1.0,
             settings: GlmmSettings = GlmmSettings()) -> GlmmFit:
    """Fit the logistic mixed model to a cohort dichotomized at ``threshold_k``."""
    designs, responses, _ = stack_designs(data, knot_months,
                                          outcome="dichotomized", threshold_k=threshold_k)
    return fit_glmm_designs(designs, responses, threshold_k=threshold_k,
                            knot_months=knot_months, settings=settings)


def fit_glmm_designs(designs, responses, threshold_k: float | None = None,
                     knot_months: float = 1.0,
                     settings: GlmmSettings = GlmmSettings()) -> GlmmFit:
    if len(designs) < 2:
        raise SubjectError("need at least 2 subjects to fit a mixed model")
    check_separation(designs, responses)
    packed = _PackedBinary(designs, responses)
    flat_x = packed.xs[packed.mask]
    flat_y = packed.y[packed.mask]

    beta0, pooled_ll, irls_ok = _irls_logistic(flat_x, flat_y)
    if settings.start_beta is not None:
        beta0 = packed.to_internal(settings.start_beta)

    if settings.constrain_d_to_zero:
        if not irls_ok:
            raise NonConvergenceError("pooled logistic IRLS did not converge",
                                      last_params=packed.from_internal(beta0))
        return GlmmFit(
            beta_hat=packed.from_internal(beta0),
            d_hat=np.zeros((2, 2)),
            marginal_loglik=pooled_ll,
            integration=settings.integration,
            converged=True,
            iterations=0,
            threshold_k=threshold_k,
            knot_months=knot_months,
        )

    m = packed.n_fixed
    bounds = [(None, None)] * m + [(-10.0, 6.0), (-40.0, 40.0), (-10.0, 6.0)]

    def solve(nodes, p_start, maxiter):
        warm = {"modes": None}

        def objective(params):
            beta_i = params[:m]
            d_s = _chol_params_to_d(params[m:])
            value, modes = _marginal_loglik_packed(packed, beta_i, d_s, nodes,
                                                   modes0=warm["modes"])
            if modes is not None:
                warm["modes"] = modes
            return -value if np.isfinite(value) else 1e30

        return scipy.optimize.minimize(
            objective, p_start, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": maxiter, "ftol": 1e-12, "gtol": settings.gtol},
        )

    nodes = settings.integration.effective_nodes
    p0 = np.concatenate([beta0, [np.log(0.7), 0.0, np.log(0.7)]])
    iterations = 0
    if nodes > 1:
        # cheap Laplace presolve so the quadrature stage starts near the optimum
        pre = solve(1, p0, settings.max_iter)
        iterations += int(pre.nit)
        p0 = pre.x
    res = solve(nodes, p0, settings.max_iter)
    iterations += int(res.nit)
    if not res.success:
        raise NonConvergenceError(
            f"logistic mixed model did not converge in {settings.max_iter} "
            f"iterations: {res.message}",
            last_params=res.x, last_objective=float(res.fun),
        )
    d_s = _chol_params_to_d(res.x[m:])
    return GlmmFit(
        beta_hat=packed.from_internal(res.x[:m]),
        d_hat=d_s / np.outer(packed.z_scale, packed.z_scale),
        marginal_loglik=-float(res.fun),
        integration=settings.integration,
        converged=bool(res.success),
        iterations=iterations,
        threshold_k=threshold_k,
        knot_months=knot_months,
    )


def posterior_mode_re(fit: GlmmFit, design: DesignPair, response: np.ndarray) -> np.ndarray:
    """Posterior mode of the random effect for one subject's binary data.

    Used for resubstitution predictions on learning-sample subjects.  Falls
    back to b = 0 (with a warning) if the Newton iteration fails or the
    fitted D is zero.
    """
    if not fit.converged:
        raise NonConvergenceError("posterior_mode_re requires a converged fit")
    response = np.asarray(response, dtype=float)
    if response.shape[0] != design.x.shape[0]:
        raise SubjectError("response length must match design rows")
    eig = np.linalg.eigvalsh(fit.d_hat)
    if eig.min() <= 1e-12 * max(eig.max(), 1.0):
        return np.zeros(2)
    d_inv = np.linalg.inv(fit.d_hat)
    xs = design.x[None, :, :]
    zs = design.z[None, :, :]
    y = response[None, :]
    mask = np.ones_like(y, dtype=bool)
    modes, _, _, converged = _posterior_modes(xs, zs, y, mask, fit.beta_hat, d_inv)
    if not converged.all():
        warnings.warn("posterior mode search did not converge; using b = 0",
                      RuntimeWarning, stacklevel=2)
        return np.zeros(2)
    return modes[0]
