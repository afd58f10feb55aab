"""Plain data holders for genotype-shaped inputs.

All matrices are stored variants-by-samples, matching the on-disk TSV
layout. Missing dosages are NaN.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ParameterError


def _check_unique(ids, what):
    ids = list(ids)
    if len(set(ids)) != len(ids):
        seen = set()
        for x in ids:
            if x in seen:
                raise ParameterError(f"duplicate {what} id {x!r}")
            seen.add(x)
    return ids


@dataclass(frozen=True)
class GenotypeMatrix:
    variant_ids: list
    sample_ids: list
    dosages: np.ndarray
    chromosomes: list | None = field(default=None, compare=False)
    positions: list | None = field(default=None, compare=False)

    def __post_init__(self):
        vids = _check_unique(self.variant_ids, "variant")
        sids = _check_unique(self.sample_ids, "sample")
        D = np.asarray(self.dosages, dtype=np.float64)
        if D.shape != (len(vids), len(sids)):
            raise ParameterError(
                f"dosage matrix {D.shape} does not match {len(vids)} variants x "
                f"{len(sids)} samples"
            )
        object.__setattr__(self, "variant_ids", vids)
        object.__setattr__(self, "sample_ids", sids)
        object.__setattr__(self, "dosages", D)

    @property
    def n_variants(self) -> int:
        return len(self.variant_ids)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def has_missing(self) -> bool:
        return bool(np.isnan(self.dosages).any())

    def select_samples(self, idx) -> "GenotypeMatrix":
        idx = np.asarray(idx)
        return GenotypeMatrix(
            self.variant_ids,
            [self.sample_ids[i] for i in idx],
            self.dosages[:, idx],
            self.chromosomes,
            self.positions,
        )

    def select_variants(self, idx) -> "GenotypeMatrix":
        idx = np.asarray(idx, dtype=int)
        pick = lambda xs: None if xs is None else [xs[i] for i in idx]  # noqa: E731
        return GenotypeMatrix(
            [self.variant_ids[i] for i in idx],
            self.sample_ids,
            self.dosages[idx, :],
            pick(self.chromosomes),
            pick(self.positions),
        )


@dataclass(frozen=True)
class ReferencePanel:
    """Complete reference genotypes, ``N`` variants by ``S`` samples."""

    variant_ids: list
    dosages: np.ndarray
    sample_ids: list | None = None

    def __post_init__(self):
        vids = _check_unique(self.variant_ids, "variant")
        P = np.asarray(self.dosages, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != len(vids):
            raise ParameterError(f"panel shape {P.shape} does not match {len(vids)} ids")
        if P.shape[0] < 1 or P.shape[1] < 2:
            raise ParameterError("a reference panel needs >= 1 variant and >= 2 samples")
        if not np.all(np.isin(P, (0.0, 1.0, 2.0))):
            raise ParameterError("reference dosages must be 0, 1 or 2 with no missing values")
        object.__setattr__(self, "variant_ids", vids)
        object.__setattr__(self, "dosages", P)

    @property
    def n_variants(self) -> int:
        return self.dosages.shape[0]

    @property
    def n_samples(self) -> int:
        return self.dosages.shape[1]


@dataclass(frozen=True)
class CovariateMatrix:
    """Projection scores, ``kappa`` rows by ``n`` samples."""

    sample_ids: list
    values: np.ndarray

    def __post_init__(self):
        sids = _check_unique(self.sample_ids, "sample")
        V = np.asarray(self.values, dtype=np.float64)
        if V.ndim != 2 or V.shape[1] != len(sids):
            raise ParameterError(
                f"covariate matrix {V.shape} does not match {len(sids)} samples"
            )
        object.__setattr__(self, "sample_ids", sids)
        object.__setattr__(self, "values", V)

    @property
    def n_components(self) -> int:
        return self.values.shape[0]

    def by_sample(self) -> np.ndarray:
        """Samples-by-components view used as regression covariates."""
        return self.values.T

    def reorder(self, sample_ids) -> "CovariateMatrix":
        pos = {s: i for i, s in enumerate(self.sample_ids)}
        try:
            idx = [pos[s] for s in sample_ids]
        except KeyError as exc:
            raise ParameterError(f"sample {exc.args[0]!r} has no covariates") from None
        return CovariateMatrix(list(sample_ids), self.values[:, idx])
