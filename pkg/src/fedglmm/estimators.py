"""Scikit-learn style front ends for the association scans.

These take ``X`` as samples by variants, like any scikit-learn estimator,
and store per-variant statistics as fitted attributes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .containers import CovariateMatrix, GenotypeMatrix
from .exceptions import ParameterError
from .fitting import DEFAULT_MAX_ITER, DEFAULT_SIGMA2_INIT, DEFAULT_TOL, fit_pooled
from .glmm import SiteData
from .linear import linear_assoc_scan
from .projection import ReferenceProjection


def build_site_data(snp_id, dosage, covariates, phenotype):
    """Design matrix with the dosage first and covariates after it."""
    dosage = np.asarray(dosage, dtype=np.float64).reshape(-1, 1)
    if covariates is None or np.size(covariates) == 0:
        X = dosage
    else:
        X = np.hstack([dosage, np.asarray(covariates, dtype=np.float64)])
    return SiteData(snp_id, X, phenotype)


def scan_sites(site_inputs, snp_ids, *, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
               sigma2_init=DEFAULT_SIGMA2_INIT, fix_sigma2=False, n_jobs=1):
    """Pooled GLMM fit of every SNP.

    ``site_inputs`` is a list of ``(dosages, covariates, phenotype)`` per
    site with dosages shaped variants by samples. Results keep SNP order for
    any ``n_jobs``.
    """
    def one(j):
        sites = [build_site_data(snp_ids[j], D[j], C, y) for D, C, y in site_inputs]
        return fit_pooled(sites, tol, max_iter, sigma2_init=sigma2_init,
                          fix_sigma2=fix_sigma2)

    idx = range(len(snp_ids))
    if n_jobs == 1:
        return [one(j) for j in idx]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(one, idx))


class LogisticMixedScan(BaseEstimator):
    """Per-variant logistic regression with a random intercept per group.

    Parameters
    ----------
    tol : float, default=1e-6
        Convergence threshold on parameter changes.
    max_iter : int, default=50
        Outer Newton iterations per variant.
    sigma2_init : float, default=0.1
    fix_sigma2 : bool, default=False
        Keep the random-intercept variance at ``sigma2_init``.
    n_jobs : int, default=1

    Attributes
    ----------
    results_ : list of AssocResult
    coef_ : ndarray of shape (n_variants,)
        Genotype effect per variant.
    bse_, pvalues_, converged_ : ndarray of shape (n_variants,)
    """

    def __init__(self, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                 sigma2_init=DEFAULT_SIGMA2_INIT, fix_sigma2=False, n_jobs=1):
        self.tol = tol
        self.max_iter = max_iter
        self.sigma2_init = sigma2_init
        self.fix_sigma2 = fix_sigma2
        self.n_jobs = n_jobs

    def fit(self, X, y, groups, covariates=None, variant_ids=None):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        groups = np.asarray(groups)
        check_consistent_length(X, y, groups)
        if covariates is not None:
            covariates = check_array(covariates, dtype=np.float64)
            check_consistent_length(X, covariates)
        if variant_ids is None:
            variant_ids = [f"v{j}" for j in range(X.shape[1])]
        if len(variant_ids) != X.shape[1]:
            raise ParameterError("variant_ids does not match the number of columns")
        inputs = []
        for g in np.unique(groups):
            m = groups == g
            C = None if covariates is None else covariates[m]
            inputs.append((X[m].T, C, y[m]))
        self.groups_ = np.unique(groups)
        self.results_ = scan_sites(inputs, list(variant_ids), tol=self.tol,
                                   max_iter=self.max_iter, sigma2_init=self.sigma2_init,
                                   fix_sigma2=self.fix_sigma2, n_jobs=self.n_jobs)
        self.coef_ = np.array([r.beta for r in self.results_])
        self.bse_ = np.array([r.se for r in self.results_])
        self.pvalues_ = np.array([r.p_value for r in self.results_])
        self.converged_ = np.array([r.converged for r in self.results_])
        self.sigma2_ = np.array([r.sigma2 for r in self.results_])
        self.n_features_in_ = X.shape[1]
        return self


class LinearAssociationScan(BaseEstimator):
    """OLS scan of a quantitative trait; optional projection covariates.

    Parameters
    ----------
    projection : ReferenceProjection or None
        Fitted transformer used to derive covariates from ``X`` when
        ``covariates`` is not passed to :meth:`fit`.
    """

    def __init__(self, projection=None):
        self.projection = projection

    def fit(self, X, y, covariates=None, variant_ids=None):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        check_consistent_length(X, y)
        if covariates is None and self.projection is not None:
            if not isinstance(self.projection, ReferenceProjection):
                raise ParameterError("projection must be a fitted ReferenceProjection")
            covariates = self.projection.transform(X)
        n, m = X.shape
        if variant_ids is None:
            variant_ids = [f"v{j}" for j in range(m)]
        samples = [f"S{i}" for i in range(n)]
        G = GenotypeMatrix(list(variant_ids), samples, X.T)
        cov = None
        if covariates is not None:
            cov = CovariateMatrix(samples, check_array(covariates, dtype=np.float64).T)
        res = linear_assoc_scan(G, y, cov)
        self.result_ = res
        self.coef_ = res.beta
        self.bse_ = res.se
        self.tvalues_ = res.t
        self.pvalues_ = res.p_value
        self.n_features_in_ = m
        return self

    def neglog10p(self):
        check_is_fitted(self, "result_")
        return self.result_.neglog10p()
