"""Per-variant ordinary least squares scan for quantitative traits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .containers import CovariateMatrix, GenotypeMatrix
from .exceptions import ParameterError
from .glmm import P_MIN

# genotype residual sum of squares below this (per sample) counts as no variance
_ZERO_VAR = 1e-10


@dataclass(frozen=True)
class LinearScanResult:
    variant_ids: list
    beta: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p_value: np.ndarray
    status: list
    df: int

    def neglog10p(self) -> np.ndarray:
        return -np.log10(self.p_value)


def _residualizer(Z):
    Q, R = np.linalg.qr(Z)
    keep = np.abs(np.diag(R)) > 1e-10 * max(1.0, np.abs(R).max())
    return Q[:, keep]


def linear_assoc_scan(G: GenotypeMatrix, y, covariates: CovariateMatrix | None = None):
    """Regress ``y`` on intercept, dosage and covariates, one variant at a time.

    Two-sided p-values come from Student's t with ``n - kappa - 2`` degrees
    of freedom. Variants whose dosage has no variance left after removing the
    covariates are reported with status ``"monomorphic"`` and NaN statistics.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    n = G.n_samples
    if y.size != n:
        raise ParameterError(f"phenotype has {y.size} values for {n} samples")
    if not np.all(np.isfinite(y)):
        raise ParameterError("phenotype contains non-finite values")
    if G.has_missing:
        raise ParameterError("impute missing dosages before scanning")
    cols = [np.ones(n)]
    kappa = 0
    if covariates is not None:
        if covariates.sample_ids != G.sample_ids:
            covariates = covariates.reorder(G.sample_ids)
        cols.extend(covariates.values)
        kappa = covariates.n_components
    Z = np.column_stack(cols)
    df = n - kappa - 2
    if df < 1:
        raise ParameterError(f"{n} samples leave no residual degrees of freedom")

    Q = _residualizer(Z)
    y_res = y - Q @ (Q.T @ y)
    D = G.dosages
    D_res = D - (D @ Q) @ Q.T
    sxx = np.einsum("ij,ij->i", D_res, D_res)
    sxy = D_res @ y_res
    syy = float(y_res @ y_res)

    mono = sxx <= _ZERO_VAR * n
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(mono, np.nan, sxy / sxx)
        rss = np.maximum(syy - beta * sxy, 0.0)
        se = np.sqrt(rss / df / sxx)
        t = beta / se
    p = 2.0 * stats.t.sf(np.abs(t), df)
    p = np.where(mono, np.nan, np.clip(p, P_MIN, 1.0))
    se = np.where(mono, np.nan, se)
    t = np.where(mono, np.nan, t)
    status = ["monomorphic" if m else "ok" for m in mono]
    return LinearScanResult(list(G.variant_ids), beta, se, t, p, status, df)
