"""Outer Newton loop shared by the pooled oracle and the federated coordinator.

The loop only ever sees site summaries that have already been summed, so the
same :class:`NewtonLoop` drives both :func:`fit_pooled` and the coordinator.
Given identical summaries in identical order the two produce bit-identical
trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .exceptions import ParameterError, ProtocolError, SingularHessianError
from .glmm import (
    SIGMA2_FLOOR,
    AssocResult,
    LocalStats,
    SiteData,
    compute_site_stats,
    newton_step,
    sigma2_from_moments,
    wald_inference,
)

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 50
DEFAULT_SIGMA2_INIT = 0.1
MAX_HALVINGS = 10
BETA_BOUND = 50.0
# relative slack on the Laplace log-likelihood before a step is halved
ASCENT_SLACK = 1e-9


@dataclass(frozen=True)
class Aggregate:
    """Sum of one round of LocalStats over all sites."""

    snp_id: str
    k: int
    n_total: float
    gradient: np.ndarray
    hessian: np.ndarray
    mu_sum: float
    moment_sum: float
    laplace_loglik: float
    mu_hats: tuple | None = None
    mu_curvatures: tuple | None = None


def sum_local_stats(stats: Sequence[LocalStats], *, keep_sites=True) -> Aggregate:
    """Element-wise sum of site summaries in the given (fixed) site order."""
    if not stats:
        raise ProtocolError("cannot aggregate an empty list of LocalStats")
    first = stats[0]
    shape = first.gradient.shape
    grad = np.array(first.gradient, dtype=np.float64)
    hess = np.array(first.hessian, dtype=np.float64)
    n_total = first.n
    mu_sum = first.mu_hat
    moment = first.sigma2_moment
    loglik = first.laplace_loglik
    for s in stats[1:]:
        if s.snp_id != first.snp_id:
            raise ProtocolError(
                f"LocalStats for {s.snp_id!r} mixed into round for {first.snp_id!r}"
            )
        if s.gradient.shape != shape or s.hessian.shape != hess.shape:
            raise ProtocolError(f"dimension mismatch in LocalStats for {s.snp_id!r}")
        grad = grad + s.gradient
        hess = hess + s.hessian
        n_total = n_total + s.n
        mu_sum = mu_sum + s.mu_hat
        moment = moment + s.sigma2_moment
        loglik = loglik + s.laplace_loglik
    mus = curvs = None
    if keep_sites:
        mus = tuple(s.mu_hat for s in stats)
        curvs = tuple(s.mu_curvature for s in stats)
    return Aggregate(
        snp_id=first.snp_id,
        k=len(stats),
        n_total=n_total,
        gradient=grad,
        hessian=hess,
        mu_sum=mu_sum,
        moment_sum=moment,
        laplace_loglik=loglik,
        mu_hats=mus,
        mu_curvatures=curvs,
    )


class NewtonLoop:
    """State machine for one SNP's outer iterations.

    Call :attr:`point` to get the ``(beta, sigma2)`` the sites must evaluate
    next, then :meth:`observe` with the aggregate they produce. Each call to
    :meth:`observe` is one outer iteration. A step that lowers the summed
    Laplace log-likelihood is halved (both the fixed-effect and the variance
    parts) up to ``max_halvings`` times.

    Convergence is declared when the change between consecutive accepted
    points in ``beta`` (max-norm), in the summed random effects and in
    ``sigma2`` all fall below ``tol``.
    """

    def __init__(
        self,
        n_params: int,
        k: int,
        *,
        tol: float = DEFAULT_TOL,
        max_iter: int = DEFAULT_MAX_ITER,
        sigma2_init: float = DEFAULT_SIGMA2_INIT,
        fix_sigma2: bool = False,
        max_halvings: int = MAX_HALVINGS,
        beta_bound: float = BETA_BOUND,
        beta_init=None,
    ):
        if n_params < 1 or k < 1:
            raise ParameterError("need at least one parameter and one site")
        if tol <= 0 or max_iter < 1:
            raise ParameterError("tol must be positive and max_iter >= 1")
        if sigma2_init < SIGMA2_FLOOR:
            raise ParameterError(f"sigma2_init must be >= {SIGMA2_FLOOR}")
        self.n_params = n_params
        self.k = k
        self.tol = tol
        self.max_iter = max_iter
        self.fix_sigma2 = fix_sigma2
        self.max_halvings = max_halvings
        self.beta_bound = beta_bound

        beta0 = np.zeros(n_params) if beta_init is None else np.array(beta_init, float)
        self.beta = beta0
        self.sigma2 = float(sigma2_init)
        self.iteration = 0
        self.done = False
        self.converged = False
        self.status = "running"
        self.trajectory: list[np.ndarray] = []
        self.loglik_trace: list[float] = []
        self._acc = None  # (beta, sigma2, Aggregate) of the last accepted point
        self._step = None  # (delta_beta, delta_sigma2) from the accepted point
        self._halvings = 0

    @property
    def point(self):
        return self.beta, self.sigma2

    def _finish(self, status):
        self.done = True
        self.status = status
        self.converged = status == "ok"

    def observe(self, agg: Aggregate) -> None:
        if self.done:
            raise ProtocolError("observe() called on a finished SNP")
        if agg.gradient.shape != (self.n_params,):
            raise ProtocolError(
                f"gradient has shape {agg.gradient.shape}, expected ({self.n_params},)"
            )
        self.iteration += 1
        self.trajectory.append(self.beta.copy())
        beta_c, sigma2_c = self.beta, self.sigma2
        loglik = agg.laplace_loglik

        if self._acc is not None:
            prev_loglik = self._acc[2].laplace_loglik
            slack = ASCENT_SLACK * max(1.0, abs(prev_loglik))
            if not (loglik >= prev_loglik - slack):
                if self._halvings >= self.max_halvings:
                    self._finish("line_search_failed")
                    return
                if self.iteration >= self.max_iter:
                    self._finish("not_converged")
                    return
                self._halvings += 1
                t = 0.5**self._halvings
                beta_a, sigma2_a, _ = self._acc
                self.beta = beta_a + t * self._step[0]
                self.sigma2 = max(SIGMA2_FLOOR, sigma2_a + t * self._step[1])
                return

        prev = self._acc
        self._acc = (beta_c, sigma2_c, agg)
        self.loglik_trace.append(loglik)

        if not np.all(np.isfinite(beta_c)) or np.max(np.abs(beta_c)) > self.beta_bound:
            self._finish("diverged")
            return
        if prev is not None:
            d_beta = float(np.max(np.abs(beta_c - prev[0])))
            d_mu = abs(agg.mu_sum - prev[2].mu_sum)
            d_sigma2 = abs(sigma2_c - prev[1])
            if max(d_beta, d_mu, d_sigma2) < self.tol:
                self._finish("ok")
                return
        if self.iteration >= self.max_iter:
            self._finish("not_converged")
            return
        try:
            beta_new = newton_step(beta_c, agg.gradient, agg.hessian)
        except SingularHessianError:
            self._finish("singular")
            return
        if self.fix_sigma2:
            sigma2_new = sigma2_c
        else:
            sigma2_new = sigma2_from_moments(agg.moment_sum, agg.k)
        self._step = (beta_new - beta_c, sigma2_new - sigma2_c)
        self._halvings = 0
        self.beta = beta_new
        self.sigma2 = sigma2_new

    @property
    def accepted(self):
        return self._acc

    def result(self, snp_id: str) -> AssocResult:
        """Wald summary at the last accepted point."""
        if self._acc is None:
            nan = math.nan
            return AssocResult(snp_id, nan, nan, nan, nan, self.iteration, False,
                               self.sigma2, self.status, None,
                               tuple(self.trajectory))
        beta, sigma2, agg = self._acc
        status = self.status if self.done else "not_converged"
        try:
            se, z, p = wald_inference(beta, agg.hessian)
        except SingularHessianError:
            se = z = p = np.full(beta.shape, math.nan)
            if status == "ok":
                status = "singular"
        converged = status == "ok"
        return AssocResult(
            snp_id=snp_id,
            beta=float(beta[0]),
            se=float(se[0]),
            z=float(z[0]),
            p_value=float(p[0]),
            n_iterations=self.iteration,
            converged=converged,
            sigma2=float(sigma2),
            status=status,
            coef=beta.copy(),
            trajectory=tuple(self.trajectory),
            coef_se=np.asarray(se, dtype=np.float64),
        )


def fit_pooled(
    sites: Sequence[SiteData],
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    *,
    sigma2_init: float = DEFAULT_SIGMA2_INIT,
    fix_sigma2: bool = False,
    max_halvings: int = MAX_HALVINGS,
) -> AssocResult:
    """Run the federated estimator in one process over a list of sites.

    Every site keeps its own warm-started random effect exactly as a remote
    site would, so the result matches a federated run on the same split.
    """
    if not sites:
        raise ParameterError("fit_pooled needs at least one site")
    snp_id = sites[0].snp_id
    n_params = sites[0].n_params
    for s in sites:
        if s.snp_id != snp_id or s.n_params != n_params:
            raise ParameterError("all sites must share snp_id and design width")
    loop = NewtonLoop(
        n_params,
        len(sites),
        tol=tol,
        max_iter=max_iter,
        sigma2_init=sigma2_init,
        fix_sigma2=fix_sigma2,
        max_halvings=max_halvings,
    )
    mus = [0.0] * len(sites)
    while not loop.done:
        beta, sigma2 = loop.point
        stats = []
        for i, site in enumerate(sites):
            st = compute_site_stats(site, beta, sigma2, mus[i])
            mus[i] = st.mu_hat
            stats.append(st)
        loop.observe(sum_local_stats(stats))
    return loop.result(snp_id)


def with_status(result: AssocResult, status: str) -> AssocResult:
    return replace(result, status=status, converged=status == "ok")
