"""Per-SNP logistic random-intercept model with a Laplace-approximated likelihood.

Each site ``i`` holds a design matrix ``X_i`` (genotype dosage in column 0,
population covariates after it), a binary phenotype ``y_i`` and a site
random intercept ``mu_i ~ N(0, sigma2)``. The linear predictor is
``eta = X_i @ beta + mu_i`` with a logistic inverse link.

All functions here are pure and operate on one site at a time; the pieces
that combine sites live in :mod:`fedglmm.fitting`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .exceptions import ConvergenceError, ParameterError, SingularHessianError

SIGMA2_FLOOR = 1e-6
INNER_TOL = 1e-10
INNER_MAX_ITER = 100
LOG_2PI = math.log(2.0 * math.pi)
# smallest positive double; p-values never underflow to exactly zero
P_MIN = float(np.nextafter(0.0, 1.0))
# reciprocal condition number below which a Hessian is treated as singular
RCOND_MIN = 1e-13


@dataclass(frozen=True)
class SiteData:
    """One site's data for one SNP.

    ``design`` has shape ``(n_i, p + 1)``; column 0 is the genotype dosage.
    """

    snp_id: str
    design: np.ndarray
    phenotype: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.design, dtype=np.float64)
        y = np.asarray(self.phenotype, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ParameterError(
                f"design {X.shape} and phenotype {y.shape} do not conform"
            )
        if X.shape[0] < 1:
            raise ParameterError("a site needs at least one sample")
        if not np.all(np.isfinite(X)):
            raise ParameterError("design contains non-finite values")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ParameterError("phenotype entries must be 0 or 1")
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "phenotype", y)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def n_params(self) -> int:
        return self.design.shape[1]


@dataclass(frozen=True)
class LocalStats:
    """One site's per-round summary for one SNP.

    ``sigma2_moment`` is ``mu_hat**2 + 1/mu_curvature``, the site's
    contribution to the variance update; shipping it pre-squared keeps every
    field the coordinator consumes additive across sites.
    """

    snp_id: str
    n: float
    gradient: np.ndarray
    hessian: np.ndarray
    mu_hat: float
    mu_curvature: float
    local_se: np.ndarray
    laplace_loglik: float
    sigma2_moment: float
    singular: bool = False


@dataclass
class GlobalModel:
    beta: np.ndarray
    sigma2: float
    iteration: int = 0
    converged: bool = False


@dataclass(frozen=True)
class AssocResult:
    snp_id: str
    beta: float
    se: float
    z: float
    p_value: float
    n_iterations: int
    converged: bool
    sigma2: float
    status: str = "ok"
    coef: np.ndarray = field(default=None, repr=False, compare=False)
    trajectory: tuple = field(default=(), repr=False, compare=False)
    coef_se: np.ndarray = field(default=None, repr=False, compare=False)


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ParameterError("non-finite input")


def _log1pexp(eta):
    # log(1 + exp(eta)) without overflow
    return np.logaddexp(0.0, eta)


def site_conditional_loglik(site: SiteData, beta, mu: float, sigma2: float) -> float:
    """Log of the joint density of ``y_i`` and ``mu_i = mu`` given ``beta``.

    The Bernoulli log-likelihood at ``eta = X beta + mu`` plus the
    ``N(0, sigma2)`` log-density of ``mu``.
    """
    beta = np.asarray(beta, dtype=np.float64)
    _check_finite(beta, mu, sigma2)
    if sigma2 <= 0:
        raise ParameterError(f"sigma2 must be positive, got {sigma2}")
    eta = site.design @ beta + mu
    y = site.phenotype
    data_part = float(np.sum(y * eta - _log1pexp(eta)))
    prior_part = -0.5 * (LOG_2PI + math.log(sigma2) + mu * mu / sigma2)
    return data_part + prior_part


def _inner_objective(y, offset, mu, sigma2):
    eta = offset + mu
    return float(np.sum(y * eta - _log1pexp(eta))) - 0.5 * mu * mu / sigma2


def fit_site_random_effect(site: SiteData, beta, sigma2: float, mu0: float = 0.0):
    """Conditional mode of the site random intercept.

    One-dimensional Newton iteration on the strictly concave function
    ``mu -> l_i(beta, mu)``. The iteration stops once the proposed step is
    below ``1e-10`` and returns the current iterate without applying it,
    which makes the result a bit-exact fixed point: restarting from the
    returned value returns it unchanged.

    Returns
    -------
    mu_hat : float
    mu_curvature : float
        ``-d2 l / d mu2`` at ``mu_hat``; always positive.
    """
    beta = np.asarray(beta, dtype=np.float64)
    _check_finite(beta, mu0, sigma2)
    if sigma2 < SIGMA2_FLOOR:
        raise ParameterError(f"sigma2 {sigma2} is below the floor {SIGMA2_FLOOR}")
    y = site.phenotype
    offset = site.design @ beta
    prec = 1.0 / sigma2
    mu = float(mu0)
    for _ in range(INNER_MAX_ITER):
        p = special.expit(offset + mu)
        score = float(np.sum(y - p)) - mu * prec
        curvature = float(np.sum(p * (1.0 - p))) + prec
        step = score / curvature
        if not math.isfinite(step):
            break
        if abs(step) < INNER_TOL:
            return mu, curvature
        t = 1.0
        if abs(step) > 1e-3:
            # guard against overshoot far from the mode
            f0 = _inner_objective(y, offset, mu, sigma2)
            while t > 1e-8 and _inner_objective(y, offset, mu + t * step, sigma2) < f0:
                t *= 0.5
        mu += t * step
    raise ConvergenceError(
        f"random-effect Newton did not converge for {site.snp_id}", last_iterate=mu
    )


def _neg_definite_inverse(hessian):
    """Inverse of ``-hessian`` via Cholesky, or None if not positive definite."""
    A = -np.asarray(hessian, dtype=np.float64)
    try:
        c, low = linalg.cho_factor(A, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        return None
    diag = np.diag(c) ** 2
    if diag.min() <= RCOND_MIN * diag.max():
        return None
    return linalg.cho_solve((c, low), np.eye(A.shape[0]))


def site_local_stats(
    site: SiteData, beta, sigma2: float, mu_hat: float, mu_curvature: float
) -> LocalStats:
    """Profile gradient and Hessian of ``max_mu l_i(beta, mu)`` at ``beta``.

    The gradient is ``X^T (y - p)`` at the conditional mode (envelope
    theorem). The Hessian is the Schur complement of the joint
    ``(beta, mu)`` Hessian, ``-X^T W X + h h^T / c`` with ``h = X^T w`` and
    ``c = sum(w) + 1/sigma2``.
    """
    beta = np.asarray(beta, dtype=np.float64)
    X = site.design
    y = site.phenotype
    p = special.expit(X @ beta + mu_hat)
    w = p * (1.0 - p)
    grad = X.T @ (y - p)
    h = X.T @ w
    hess = -(X.T * w) @ X + np.outer(h, h) / mu_curvature
    hess = 0.5 * (hess + hess.T)

    inv = _neg_definite_inverse(hess)
    singular = inv is None
    if singular:
        local_se = np.full(X.shape[1], np.nan)
    else:
        local_se = np.sqrt(np.diag(inv))

    loglik = site_conditional_loglik(site, beta, mu_hat, sigma2)
    laplace = loglik + 0.5 * LOG_2PI - 0.5 * math.log(mu_curvature)
    return LocalStats(
        snp_id=site.snp_id,
        n=float(site.n),
        gradient=grad,
        hessian=hess,
        mu_hat=float(mu_hat),
        mu_curvature=float(mu_curvature),
        local_se=local_se,
        laplace_loglik=laplace,
        sigma2_moment=mu_hat * mu_hat + 1.0 / mu_curvature,
        singular=singular,
    )


def compute_site_stats(site: SiteData, beta, sigma2: float, mu0: float = 0.0) -> LocalStats:
    """Refresh the random effect and return the site's LocalStats."""
    mu_hat, curv = fit_site_random_effect(site, beta, sigma2, mu0)
    return site_local_stats(site, beta, sigma2, mu_hat, curv)


def newton_step(beta_prev, grad_global, hess_global):
    """``beta_prev - H^{-1} g`` via a Cholesky solve of ``-H``."""
    beta_prev = np.asarray(beta_prev, dtype=np.float64)
    g = np.asarray(grad_global, dtype=np.float64)
    H = np.asarray(hess_global, dtype=np.float64)
    if g.shape != beta_prev.shape or H.shape != (g.size, g.size):
        raise ParameterError(
            f"shape mismatch: beta {beta_prev.shape}, grad {g.shape}, hess {H.shape}"
        )
    if not np.allclose(H, H.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(H).max())):
        raise ParameterError("Hessian is not symmetric")
    A = -H
    try:
        c = linalg.cho_factor(A, lower=True)
        d = np.diag(c[0]) ** 2
        if d.min() <= RCOND_MIN * d.max():
            raise linalg.LinAlgError("near-singular")
    except (linalg.LinAlgError, ValueError):
        eig = np.linalg.eigvalsh(A) if np.all(np.isfinite(A)) else np.array([np.nan])
        cond = float(eig.max() / eig.min()) if eig.min() > 0 else math.inf
        raise SingularHessianError(
            f"negative Hessian is not positive definite (min eigenvalue "
            f"{eig.min():.3g}, condition {cond:.3g})",
            condition=cond,
            min_eigenvalue=float(eig.min()),
        ) from None
    return beta_prev + linalg.cho_solve(c, g)


def sigma2_from_moments(moment_sum: float, k: int) -> float:
    return max(SIGMA2_FLOOR, float(moment_sum) / k)


def update_sigma2(mu_hats, mu_curvatures) -> float:
    """EM update ``mean(mu_hat**2 + 1/curvature)``, floored at ``SIGMA2_FLOOR``."""
    mu = np.asarray(mu_hats, dtype=np.float64).ravel()
    c = np.asarray(mu_curvatures, dtype=np.float64).ravel()
    if mu.size < 1 or mu.shape != c.shape:
        raise ParameterError("need matching, non-empty mu_hats and curvatures")
    if np.any(c <= 0):
        raise ParameterError("curvatures must be positive")
    return sigma2_from_moments(float(np.sum(mu * mu + 1.0 / c)), mu.size)


def two_sided_normal_p(z):
    """``2 * (1 - Phi(|z|))`` through ``erfc`` so the tail keeps full precision."""
    z = np.asarray(z, dtype=np.float64)
    p = special.erfc(np.abs(z) / math.sqrt(2.0))
    return np.clip(p, P_MIN, 1.0)


def wald_inference(beta, hess_global):
    """Standard errors, z statistics and two-sided p-values per coefficient."""
    beta = np.asarray(beta, dtype=np.float64)
    inv = _neg_definite_inverse(hess_global)
    if inv is None:
        raise SingularHessianError("negative Hessian is not positive definite")
    se = np.sqrt(np.diag(inv))
    z = beta / se
    return se, z, two_sided_normal_p(z)
