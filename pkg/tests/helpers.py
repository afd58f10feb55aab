"""Shared fixtures-by-function for the test suite and the acceptance checks."""

from __future__ import annotations

import math

import numpy as np
from scipy import optimize, special

from fedglmm.containers import GenotypeMatrix
from fedglmm.federation import SiteWorker
from fedglmm.glmm import SiteData
from fedglmm.projection import compute_reference_loadings, projection_covariates
from fedglmm.simulation import SimSpec, kmeans_partition, simulate_populations


def random_site(rng, n=None, p=None, snp_id="rs0", scale=0.5):
    """Small SiteData with a dosage column plus ``p`` covariates."""
    n = int(rng.integers(2, 21)) if n is None else n
    p = int(rng.integers(0, 3)) if p is None else p
    g = rng.binomial(2, rng.uniform(0.1, 0.9), size=n).astype(float)
    X = np.column_stack([g, rng.normal(size=(n, p))]) if p else g[:, None]
    y = rng.integers(0, 2, size=n).astype(float)
    beta = rng.normal(0.0, scale, size=p + 1)
    return SiteData(snp_id, X, y), beta


# independent oracles --------------------------------------------------------

def naive_loglik(site: SiteData, beta, mu, sigma2):
    total = 0.0
    for x, y in zip(site.design, site.phenotype):
        eta = float(np.dot(x, beta)) + mu
        total += y * eta - (eta + math.log1p(math.exp(-eta)) if eta > 0
                            else math.log1p(math.exp(eta)))
    return total - 0.5 * math.log(2 * math.pi * sigma2) - 0.5 * mu * mu / sigma2


def mu_score(site, beta, mu, sigma2):
    p = special.expit(site.design @ beta + mu)
    return float(np.sum(site.phenotype - p)) - mu / sigma2


def mu_hat_brent(site, beta, sigma2):
    """Inner maximizer by bracketing root-finding on the score."""
    lo, hi = -1.0, 1.0
    while mu_score(site, beta, lo, sigma2) < 0:
        lo *= 2
    while mu_score(site, beta, hi, sigma2) > 0:
        hi *= 2
    return optimize.brentq(lambda m: mu_score(site, beta, m, sigma2), lo, hi,
                           xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def profile_loglik(site, beta, sigma2):
    return naive_loglik(site, beta, mu_hat_brent(site, beta, sigma2), sigma2)


def irls_logistic(X, y, tol=1e-12, max_iter=100):
    """Plain logistic regression by iteratively reweighted least squares."""
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-(X @ beta)))
        w = p * (1 - p)
        z = X @ beta + (y - p) / w
        new = np.linalg.lstsq(X * np.sqrt(w)[:, None], z * np.sqrt(w), rcond=None)[0]
        done = np.max(np.abs(new - beta)) < tol
        beta = new
        if done:
            break
    p = 1.0 / (1.0 + np.exp(-(X @ beta)))
    cov = np.linalg.inv((X * (p * (1 - p))[:, None]).T @ X)
    return beta, np.sqrt(np.diag(cov))


# the federated benchmark dataset --------------------------------------------

FED_SPEC = SimSpec(n_individuals=600, n_variants=400, n_causal=10, causal_max_af=0.2,
                   effect_size_sd=0.5, trait_kind="quantitative",
                   population_bias=(0.0, 0.6, 1.2), reference_size=60, seed=2024)
SITE_SHIFT = 1.0
PREVALENCE = 0.4


def federated_dataset(spec=FED_SPEC, n_sites=3, n_snps=50, kappa=4, intercept=False,
                      site_shift=SITE_SHIFT, prevalence=PREVALENCE, partition="random"):
    """Site workers and pooled inputs for a simulated multi-site study.

    ``partition="random"`` assigns samples to sites uniformly at random
    (balanced); ``"kmeans"`` clusters the projection covariates, which makes
    site membership a function of the covariates. The quantitative liability gets a per-site baseline shift (sites
    ``-shift, 0, +shift`` for three sites) before thresholding at
    ``prevalence``, so the sites differ the way a random intercept models.
    Scans the first ``n_snps`` polymorphic variants; covariates are the
    reference projection onto ``kappa`` components (plus a constant column
    when ``intercept`` is set).
    """
    sim = simulate_populations(spec)
    loadings = compute_reference_loadings(sim.reference_panel, kappa)
    cov = projection_covariates(sim.genotypes, loadings).by_sample()
    if partition == "kmeans":
        labels = kmeans_partition(cov, n_sites, seed=spec.seed)
    else:
        rng = np.random.default_rng(spec.seed)
        labels = rng.permutation(np.arange(cov.shape[0]) % n_sites)
    if intercept:
        cov = np.column_stack([np.ones(cov.shape[0]), cov])
    shifts = site_shift * (np.arange(n_sites) - (n_sites - 1) / 2.0)
    liability = sim.phenotype + shifts[labels]
    pheno = (liability > np.quantile(liability, 1.0 - prevalence)).astype(float)
    G = sim.genotypes
    poly = [j for j in range(G.n_variants) if np.ptp(G.dosages[j]) > 0][:n_snps]
    G = G.select_variants(poly)
    workers, inputs = [], []
    for k in range(n_sites):
        idx = np.flatnonzero(labels == k)
        sub = G.select_samples(idx)
        y = pheno[idx]
        workers.append(SiteWorker(f"site{k}", sub, cov[idx], y, seed=k))
        inputs.append((sub.dosages, cov[idx], y))
    return {"workers": workers, "inputs": inputs, "snp_ids": list(G.variant_ids),
            "genotypes": G, "labels": labels, "sim": sim, "phenotype": pheno,
            "covariates": cov}


def site_lists(inputs, snp_ids):
    """Per-SNP lists of SiteData for ``fit_pooled``."""
    from fedglmm.estimators import build_site_data

    return [[build_site_data(s, D[j], C, y) for D, C, y in inputs]
            for j, s in enumerate(snp_ids)]


def genotype_matrix(D, prefix="v"):
    D = np.asarray(D, dtype=float)
    return GenotypeMatrix([f"{prefix}{i}" for i in range(D.shape[0])],
                          [f"S{j}" for j in range(D.shape[1])], D)
