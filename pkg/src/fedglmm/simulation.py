"""Synthetic structured GWAS data and the projection-vs-PCA experiment.

Populations follow the Balding-Nichols model: an ancestral allele
frequency ``p`` per variant, and per population a frequency drawn from
``Beta(p (1-F) / F, (1-p) (1-F) / F)``. Genotypes are binomial draws from
the population frequency.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from sklearn.cluster import KMeans

from .containers import GenotypeMatrix, ReferencePanel
from .exceptions import ParameterError
from .linear import linear_assoc_scan
from .projection import compute_reference_loadings, projection_covariates, study_pca_covariates

log = logging.getLogger(__name__)

TRAIT_KINDS = ("quantitative", "binary")
EFFECT_DISTRIBUTIONS = ("normal", "signed")
TOP_M = (10, 20, 50, 100)
# median of the chi-square distribution with one degree of freedom
CHI2_MEDIAN = float(stats.chi2.ppf(0.5, 1))


@dataclass(frozen=True)
class SimSpec:
    """Parameters of one simulated study.

    ``fst`` and ``population_bias`` have one entry per population.
    ``effect_distribution="signed"`` gives every causal variant an effect
    of exactly ``+-effect_size_sd``. The reference panel holds
    ``reference_size`` samples per population; with
    ``matched_reference=False`` it is drawn from sister populations that
    drifted ``mismatch_fst`` further away from the study populations.
    """

    n_individuals: int = 3000
    n_variants: int = 2000
    n_populations: int = 3
    proportions: tuple = (1 / 3, 1 / 3, 1 / 3)
    fst: tuple = (0.05, 0.1, 0.15)
    n_causal: int = 20
    causal_max_af: float = 0.1
    effect_size_sd: float = 0.5
    effect_distribution: str = "normal"
    population_bias: tuple = (0.0, 1.0, 2.0)
    gender_bias: float = 0.5
    noise_sd: float = 1.0
    trait_kind: str = "quantitative"
    prevalence: float = 0.5
    reference_size: int = 100
    matched_reference: bool = True
    mismatch_fst: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("proportions", "fst", "population_bias"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        K = self.n_populations
        if K < 1:
            raise ParameterError("n_populations must be >= 1")
        if len(self.proportions) != K or len(self.fst) != K or len(self.population_bias) != K:
            raise ParameterError(
                "proportions, fst and population_bias need one entry per population"
            )
        if any(p < 0 for p in self.proportions) or not np.isclose(sum(self.proportions), 1.0):
            raise ParameterError(f"proportions must be non-negative and sum to 1, got "
                                 f"{self.proportions}")
        if any(not 0 <= f < 1 for f in self.fst) or not 0 <= self.mismatch_fst < 1:
            raise ParameterError("fst values must lie in [0, 1)")
        if not 0 < self.causal_max_af <= 0.5:
            raise ParameterError("causal_max_af must lie in (0, 0.5]")
        if self.n_individuals < 2 or self.n_variants < 1 or self.n_causal < 0:
            raise ParameterError("need >= 2 individuals, >= 1 variant and n_causal >= 0")
        if self.trait_kind not in TRAIT_KINDS:
            raise ParameterError(f"trait_kind must be one of {TRAIT_KINDS}")
        if self.effect_distribution not in EFFECT_DISTRIBUTIONS:
            raise ParameterError(f"effect_distribution must be one of {EFFECT_DISTRIBUTIONS}")
        if not 0 < self.prevalence < 1:
            raise ParameterError("prevalence must lie in (0, 1)")
        if self.reference_size < 1:
            raise ParameterError("reference_size must be >= 1")
        if self.effect_size_sd < 0 or self.noise_sd < 0:
            raise ParameterError("effect_size_sd and noise_sd must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown SimSpec fields {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "SimSpec":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SimOutput:
    genotypes: GenotypeMatrix
    phenotype: np.ndarray
    population: np.ndarray
    gender: np.ndarray
    causal_truth: list
    reference_panel: ReferencePanel
    ancestral_freq: np.ndarray = field(repr=False)
    population_freq: np.ndarray = field(repr=False)


def balding_nichols(rng, p, F):
    """Population allele frequencies drifted from ``p`` by ``F``."""
    if F == 0:
        return np.array(p, dtype=np.float64, copy=True)
    scale = (1.0 - F) / F
    return rng.beta(p * scale, (1.0 - p) * scale)


def _binomial_genotypes(rng, freq, labels):
    return rng.binomial(2, freq[:, labels]).astype(np.float64)


def simulate_populations(spec: SimSpec) -> SimOutput:
    """Generate one study and its reference panel; a pure function of ``spec``."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(4)]
    r_freq, r_geno, r_pheno, r_ref = streams
    K, n, m = spec.n_populations, spec.n_individuals, spec.n_variants

    anc = r_freq.uniform(0.05, 0.95, size=m)
    pop_freq = np.column_stack([balding_nichols(r_freq, anc, F) for F in spec.fst])

    eligible = np.flatnonzero(anc < spec.causal_max_af)
    if eligible.size < spec.n_causal:
        raise ParameterError(
            f"only {eligible.size} variants have allele frequency below "
            f"{spec.causal_max_af}; cannot pick {spec.n_causal} causal variants"
        )
    causal = np.sort(r_pheno.choice(eligible, size=spec.n_causal, replace=False))
    if spec.effect_distribution == "signed":
        effects = spec.effect_size_sd * r_pheno.choice([-1.0, 1.0], size=spec.n_causal)
    else:
        effects = r_pheno.normal(0.0, spec.effect_size_sd, size=spec.n_causal)

    counts = r_geno.multinomial(n, spec.proportions)
    labels = np.repeat(np.arange(K), counts)
    D = _binomial_genotypes(r_geno, pop_freq, labels)
    gender = r_geno.integers(0, 2, size=n)

    liability = effects @ D[causal] if spec.n_causal else np.zeros(n)
    liability = liability + np.asarray(spec.population_bias)[labels]
    liability = liability + spec.gender_bias * gender
    liability = liability + r_pheno.normal(0.0, spec.noise_sd, size=n)
    if spec.trait_kind == "binary":
        threshold = np.quantile(liability, 1.0 - spec.prevalence)
        phenotype = (liability > threshold).astype(np.float64)
    else:
        phenotype = liability

    if spec.matched_reference:
        ref_freq = pop_freq
    else:
        ref_freq = np.column_stack(
            [balding_nichols(r_ref, pop_freq[:, j], spec.mismatch_fst) for j in range(K)]
        )
    ref_labels = np.repeat(np.arange(K), spec.reference_size)
    R = _binomial_genotypes(r_ref, ref_freq, ref_labels)

    vids = [f"rs{j + 1}" for j in range(m)]
    G = GenotypeMatrix(vids, [f"IND{i + 1}" for i in range(n)], D,
                       chromosomes=["1"] * m, positions=[1000 * (j + 1) for j in range(m)])
    panel = ReferencePanel(vids, R, [f"REF{i + 1}" for i in range(R.shape[1])])
    truth = [(vids[j], float(b)) for j, b in zip(causal, effects)]
    return SimOutput(G, phenotype, labels, gender, truth, panel, anc, pop_freq)


def derived_seeds(seed: int, n: int) -> list[int]:
    """Independent per-study seeds derived from a master seed."""
    ss = np.random.SeedSequence(seed).spawn(n)
    return [int(s.generate_state(1)[0]) for s in ss]


# partitioning -------------------------------------------------------------

def kmeans_partition(features, k: int, seed: int = 0) -> np.ndarray:
    """Lloyd k-means labels ``0..k-1`` with every cluster non-empty.

    Clusters are numbered in order of their first member, so the labels
    depend only on the data and the seed.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ParameterError("features must be an n x d matrix with d >= 1")
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in [1, {n}], got {k}")
    if k == 1:
        return np.zeros(n, dtype=int)
    if k == n:
        return np.arange(n)
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=300, tol=0.0,
                algorithm="lloyd", random_state=seed)
    labels = km.fit_predict(X)
    # duplicate points can still leave a cluster empty; reseed from the farthest point
    while np.bincount(labels, minlength=k).min() == 0:
        empty = int(np.flatnonzero(np.bincount(labels, minlength=k) == 0)[0])
        sizes = np.bincount(labels, minlength=k)
        dist = np.linalg.norm(X - km.cluster_centers_[labels], axis=1)
        dist[sizes[labels] < 2] = -1.0
        labels[int(np.argmax(dist))] = empty
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    relabel = np.empty(k, dtype=int)
    relabel[labels[first[order]]] = np.arange(k)
    return relabel[labels]


# projection experiment ------------------------------------------------------

def top_m(p_values, m: int) -> np.ndarray:
    """Indices of the ``m`` smallest p-values (NaN last, ties by index)."""
    p = np.where(np.isnan(p_values), np.inf, p_values)
    return np.argsort(p, kind="stable")[:m]


def concordance(p_a, p_b, m: int) -> float:
    """Fraction of the top-``m`` variants of ``a`` that are also top-``m`` in ``b``."""
    return len(set(top_m(p_a, m)) & set(top_m(p_b, m))) / float(m)


def genomic_inflation(p_values) -> float:
    """Median chi-square (1 df) of the p-values over its null median."""
    p = np.asarray(p_values, dtype=np.float64)
    p = p[np.isfinite(p)]
    return float(np.median(stats.chi2.isf(p, 1)) / CHI2_MEDIAN)


def _spearman(a, b):
    ok = np.isfinite(a) & np.isfinite(b)
    return float(stats.spearmanr(a[ok], b[ok]).statistic)


def _pearson(a, b):
    ok = np.isfinite(a) & np.isfinite(b)
    return float(np.corrcoef(a[ok], b[ok])[0, 1])


@dataclass(frozen=True)
class StudyComparison:
    seed: int
    concordance_projection: dict
    concordance_none: dict
    spearman_projection: float
    spearman_none: float
    effect_corr_projection: float
    effect_corr_none: float
    inflation: dict


@dataclass(frozen=True)
class ProjectionReport:
    """Per-study comparisons against the study-PCA scan."""

    studies: list
    kappa: int
    matched_reference: bool
    m_values: tuple = TOP_M

    def median_concordance(self, method: str, m: int) -> float:
        key = "concordance_" + method
        return float(np.median([getattr(s, key)[m] for s in self.studies]))

    def median(self, attr: str) -> float:
        return float(np.median([getattr(s, attr) for s in self.studies]))

    def to_dict(self) -> dict:
        summary = {
            f"top{m}": {meth: self.median_concordance(meth, m)
                        for meth in ("projection", "none")}
            for m in self.m_values
        }
        for attr in ("spearman_projection", "spearman_none",
                     "effect_corr_projection", "effect_corr_none"):
            summary[attr] = self.median(attr)
        return {
            "kappa": self.kappa,
            "matched_reference": self.matched_reference,
            "n_studies": len(self.studies),
            "median": summary,
            "studies": [dataclasses.asdict(s) for s in self.studies],
        }


def compare_study(sim: SimOutput, kappa: int, seed=0, m_values=TOP_M) -> StudyComparison:
    """Scan one study with PCA, projection and no covariates."""
    G, y = sim.genotypes, sim.phenotype
    loadings = compute_reference_loadings(sim.reference_panel, kappa)
    scans = {
        "pca": linear_assoc_scan(G, y, study_pca_covariates(G, kappa)),
        "projection": linear_assoc_scan(G, y, projection_covariates(G, loadings)),
        "none": linear_assoc_scan(G, y, None),
    }
    ref = scans["pca"]
    nlp = {k: s.neglog10p() for k, s in scans.items()}
    causal = {v for v, _ in sim.causal_truth}
    null = np.array([v not in causal for v in G.variant_ids])
    return StudyComparison(
        seed=int(seed),
        concordance_projection={m: concordance(scans["projection"].p_value, ref.p_value, m)
                                for m in m_values},
        concordance_none={m: concordance(scans["none"].p_value, ref.p_value, m)
                          for m in m_values},
        spearman_projection=_spearman(nlp["projection"], nlp["pca"]),
        spearman_none=_spearman(nlp["none"], nlp["pca"]),
        effect_corr_projection=_pearson(scans["projection"].beta, ref.beta),
        effect_corr_none=_pearson(scans["none"].beta, ref.beta),
        inflation={k: genomic_inflation(s.p_value[null]) for k, s in scans.items()},
    )


def run_projection_experiment(n_studies: int, spec: SimSpec, kappa: int,
                              matched_reference: bool = True, *, m_values=TOP_M,
                              n_jobs: int = 1) -> ProjectionReport:
    """Repeat :func:`compare_study` over independently seeded studies."""
    if n_studies < 1:
        raise ParameterError("n_studies must be >= 1")
    seeds = derived_seeds(spec.seed, n_studies)

    def one(seed):
        sim = simulate_populations(spec.replace(seed=seed,
                                                matched_reference=matched_reference))
        return compare_study(sim, kappa, seed, m_values)

    if n_jobs == 1:
        studies = [one(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            studies = list(pool.map(one, seeds))
    return ProjectionReport(studies, kappa, matched_reference, tuple(m_values))
