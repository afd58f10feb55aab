"""Population covariates from a reference panel's principal components.

The reference panel is centered per variant and decomposed once; study
samples are then centered with the *reference* means and projected onto the
top ``kappa`` loadings. No study data is needed to build the loadings, so
each site can compute its covariates locally.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .containers import CovariateMatrix, GenotypeMatrix, ReferencePanel
from .exceptions import AlignmentError, ParameterError, RankDeficientError

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class PcLoadings:
    variant_ids: list
    loadings: np.ndarray
    eigenvalues: np.ndarray
    variant_means: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.loadings, dtype=np.float64)
        if L.ndim != 2 or L.shape[0] != len(self.variant_ids):
            raise ParameterError(
                f"loadings shape {L.shape} does not match {len(self.variant_ids)} variants"
            )
        ev = np.asarray(self.eigenvalues, dtype=np.float64).ravel()
        mu = np.asarray(self.variant_means, dtype=np.float64).ravel()
        if ev.size != L.shape[1] or mu.size != L.shape[0]:
            raise ParameterError("eigenvalue or mean vector has the wrong length")
        object.__setattr__(self, "variant_ids", list(self.variant_ids))
        object.__setattr__(self, "loadings", L)
        object.__setattr__(self, "eigenvalues", ev)
        object.__setattr__(self, "variant_means", mu)

    @property
    def n_components(self) -> int:
        return self.loadings.shape[1]

    def is_orthonormal(self, tol=ORTHO_TOL) -> bool:
        G = self.loadings.T @ self.loadings
        return bool(np.max(np.abs(G - np.eye(self.n_components))) < tol)


def canonicalize_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    V = np.array(vectors, dtype=np.float64, copy=True)
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def _top_components(centered: np.ndarray, kappa: int):
    """Top-``kappa`` left singular vectors and singular values."""
    U, s, _ = np.linalg.svd(centered, full_matrices=False)
    tol = s[0] * max(centered.shape) * np.finfo(float).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    if rank < kappa:
        raise RankDeficientError(
            f"centered matrix has rank {rank}, fewer than the {kappa} requested "
            f"components", rank=rank,
        )
    return canonicalize_signs(U[:, :kappa]), s[:kappa]


def compute_reference_loadings(panel: ReferencePanel, kappa: int) -> PcLoadings:
    """PCA of the per-variant centered reference panel.

    Eigenvalues are squared singular values divided by ``S - 1``.
    """
    N, S = panel.dosages.shape
    if not isinstance(kappa, (int, np.integer)) or kappa < 1 or kappa > min(N, S):
        raise ParameterError(f"kappa must be in [1, {min(N, S)}], got {kappa!r}")
    means = panel.dosages.mean(axis=1)
    centered = panel.dosages - means[:, None]
    U, s = _top_components(centered, int(kappa))
    return PcLoadings(list(panel.variant_ids), U, s**2 / (S - 1), means)


def align_to_loadings(G: GenotypeMatrix, loadings: PcLoadings) -> GenotypeMatrix:
    """Restrict and reorder study variants to the loadings' variant order.

    Study variants absent from the panel are dropped with a warning; panel
    variants absent from the study are an error.
    """
    pos = {v: i for i, v in enumerate(G.variant_ids)}
    missing = [v for v in loadings.variant_ids if v not in pos]
    if missing:
        raise AlignmentError(
            f"{len(missing)} reference variants missing from the study, first {missing[0]!r}"
        )
    extra = G.n_variants - len(loadings.variant_ids)
    if extra:
        warnings.warn(f"dropping {extra} study variants not present in the reference panel")
        log.warning("dropping %d study variants not in the reference panel", extra)
    if list(G.variant_ids) == loadings.variant_ids:
        return G
    return G.select_variants([pos[v] for v in loadings.variant_ids])


def center_study_genotypes(G: GenotypeMatrix, loadings: PcLoadings) -> np.ndarray:
    """Subtract the reference per-variant mean from every study dosage."""
    if list(G.variant_ids) != loadings.variant_ids:
        for i, (a, b) in enumerate(zip(G.variant_ids, loadings.variant_ids)):
            if a != b:
                raise AlignmentError(
                    f"variant order diverges at position {i}: study {a!r} vs reference {b!r}"
                )
        raise AlignmentError(
            f"study has {G.n_variants} variants, reference has {len(loadings.variant_ids)}"
        )
    if G.has_missing:
        raise ParameterError("impute missing dosages before centering")
    return G.dosages - loadings.variant_means[:, None]


def project_covariates(centered, loadings: PcLoadings, sample_ids=None) -> CovariateMatrix:
    """Scores ``c[k, j] = sum_i centered[i, j] * loadings[i, k]``."""
    C = np.asarray(centered, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != loadings.loadings.shape[0]:
        raise ParameterError(
            f"centered matrix {C.shape} does not conform with loadings "
            f"{loadings.loadings.shape}"
        )
    if sample_ids is None:
        sample_ids = [f"S{j}" for j in range(C.shape[1])]
    return CovariateMatrix(list(sample_ids), loadings.loadings.T @ C)


def projection_covariates(G: GenotypeMatrix, loadings: PcLoadings) -> CovariateMatrix:
    """Align, center and project in one call."""
    G = align_to_loadings(G, loadings)
    return project_covariates(center_study_genotypes(G, loadings), loadings, G.sample_ids)


def study_pca_covariates(G: GenotypeMatrix, kappa: int) -> CovariateMatrix:
    """Principal-component scores of the study's own (pooled) genotypes.

    This is the centralized baseline the projection approach stands in for.
    """
    if G.has_missing:
        raise ParameterError("impute missing dosages before PCA")
    means = G.dosages.mean(axis=1)
    centered = G.dosages - means[:, None]
    U, _ = _top_components(centered, kappa)
    return CovariateMatrix(G.sample_ids, U.T @ centered)


class ReferenceProjection(TransformerMixin, BaseEstimator):
    """Scikit-learn transformer wrapping reference PCA and projection.

    Unlike the rest of the package this follows the scikit-learn layout:
    ``X`` is samples by variants.

    Parameters
    ----------
    n_components : int, default=4
        Number of reference components to project onto.

    Attributes
    ----------
    loadings_ : PcLoadings
    components_ : ndarray of shape (n_components, n_features)
    mean_ : ndarray of shape (n_features,)
    explained_variance_ : ndarray of shape (n_components,)
    """

    def __init__(self, n_components=4):
        self.n_components = n_components

    def fit(self, X, y=None, variant_ids=None):
        X = check_array(X, dtype=np.float64)
        if variant_ids is None:
            variant_ids = [f"v{i}" for i in range(X.shape[1])]
        panel = ReferencePanel(list(variant_ids), X.T)
        self.loadings_ = compute_reference_loadings(panel, self.n_components)
        self.components_ = self.loadings_.loadings.T
        self.mean_ = self.loadings_.variant_means
        self.explained_variance_ = self.loadings_.eigenvalues
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_loadings(cls, loadings: PcLoadings):
        est = cls(n_components=loadings.n_components)
        est.loadings_ = loadings
        est.components_ = loadings.loadings.T
        est.mean_ = loadings.variant_means
        est.explained_variance_ = loadings.eigenvalues
        est.n_features_in_ = loadings.loadings.shape[0]
        return est

    def transform(self, X):
        check_is_fitted(self, "loadings_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ParameterError(
                f"X has {X.shape[1]} variants, the reference has {self.n_features_in_}"
            )
        return (X - self.mean_) @ self.loadings_.loadings
