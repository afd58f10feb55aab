import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fedglmm.exceptions import ParameterError
from fedglmm.linear import linear_assoc_scan
from fedglmm.projection import compute_reference_loadings, projection_covariates
from fedglmm.simulation import (
    SimSpec,
    concordance,
    genomic_inflation,
    kmeans_partition,
    run_projection_experiment,
    simulate_populations,
    top_m,
)

FLAT = dict(fst=(0.0, 0.0, 0.0), population_bias=(0.0, 0.0, 0.0), gender_bias=0.0)


def test_no_drift_shares_frequencies_and_matches_mean_dosage():
    spec = SimSpec(n_individuals=2000, n_variants=300, n_causal=5, seed=5, **FLAT)
    sim = simulate_populations(spec)
    assert np.array_equal(sim.population_freq[:, 0], sim.population_freq[:, 2])
    p = sim.ancestral_freq
    n = spec.n_individuals
    z = np.abs(sim.genotypes.dosages.mean(axis=1) - 2 * p) / np.sqrt(2 * p * (1 - p) / n)
    # a 3-sigma band holds for 99.7% of variants, not for every one of 300
    assert np.mean(z < 3) >= 0.99
    assert np.all(z < 5)


def test_null_phenotype_gives_uniform_p():
    spec = SimSpec(n_individuals=1000, n_variants=1000, effect_size_sd=0.0, seed=3, **FLAT)
    sim = simulate_populations(spec)
    res = linear_assoc_scan(sim.genotypes, sim.phenotype)
    assert stats.kstest(res.p_value, "uniform").statistic < 0.05


@settings(max_examples=10)
@given(st.integers(0, 2**31))
def test_same_seed_same_output(seed):
    spec = SimSpec(n_individuals=50, n_variants=200, n_causal=3, reference_size=5, seed=seed)
    a, b = simulate_populations(spec), simulate_populations(spec)
    assert np.array_equal(a.genotypes.dosages, b.genotypes.dosages)
    assert np.array_equal(a.phenotype, b.phenotype)
    assert np.array_equal(a.reference_panel.dosages, b.reference_panel.dosages)
    assert a.causal_truth == b.causal_truth


@settings(max_examples=10)
@given(st.integers(0, 2**31))
def test_causal_variants_respect_the_frequency_cap(seed):
    spec = SimSpec(n_individuals=50, n_variants=400, n_causal=5, reference_size=5,
                   seed=seed)
    sim = simulate_populations(spec)
    idx = [sim.genotypes.variant_ids.index(v) for v, _ in sim.causal_truth]
    assert len(idx) == spec.n_causal
    assert np.all(sim.ancestral_freq[idx] < spec.causal_max_af)


def test_infeasible_causal_selection():
    with pytest.raises(ParameterError, match="cannot pick"):
        simulate_populations(SimSpec(n_individuals=20, n_variants=30, n_causal=20))


def test_binary_trait_prevalence():
    spec = SimSpec(n_individuals=500, n_variants=300, trait_kind="binary", prevalence=0.3)
    y = simulate_populations(spec).phenotype
    assert set(np.unique(y)) == {0.0, 1.0}
    assert y.mean() == pytest.approx(0.3, abs=0.01)


def test_spec_validation_and_round_trip():
    with pytest.raises(ParameterError):
        SimSpec(proportions=(0.5, 0.6, -0.1))
    with pytest.raises(ParameterError):
        SimSpec(fst=(0.1, 1.0, 0.1))
    with pytest.raises(ParameterError):
        SimSpec(causal_max_af=0.6)
    with pytest.raises(ParameterError):
        SimSpec.from_dict({"n_snps": 3})
    spec = SimSpec(seed=9, trait_kind="binary")
    assert SimSpec.from_dict(spec.to_dict()) == spec


def test_causal_truth_recovery():
    spec = SimSpec(n_individuals=1000, n_variants=2000, effect_size_sd=1.0,
                   effect_distribution="signed", seed=11, **FLAT)
    sim = simulate_populations(spec)
    res = linear_assoc_scan(sim.genotypes, sim.phenotype)
    top = {sim.genotypes.variant_ids[i] for i in top_m(res.p_value, spec.n_causal)}
    causal = {v for v, _ in sim.causal_truth}
    assert len(top & causal) / len(causal) >= 0.9


def test_population_bias_inflates_unadjusted_scan():
    spec = SimSpec(n_individuals=1500, n_variants=1000, seed=21)
    sim = simulate_populations(spec)
    causal = {v for v, _ in sim.causal_truth}
    null = np.array([v not in causal for v in sim.genotypes.variant_ids])
    cov = projection_covariates(sim.genotypes, compute_reference_loadings(sim.reference_panel, 4))
    adj = genomic_inflation(linear_assoc_scan(sim.genotypes, sim.phenotype, cov).p_value[null])
    raw = genomic_inflation(linear_assoc_scan(sim.genotypes, sim.phenotype).p_value[null])
    assert raw > adj


def test_genomic_inflation_of_uniform_is_one():
    p = (np.arange(100001) + 0.5) / 100001
    assert genomic_inflation(p) == pytest.approx(1.0, abs=1e-3)


def test_concordance_and_top_m():
    p = np.array([0.5, 0.01, np.nan, 0.2, 0.01])
    assert list(top_m(p, 3)) == [1, 4, 3]
    assert concordance(p, p, 3) == 1.0
    assert concordance(p, np.array([0.01, 0.9, 0.9, 0.9, 0.9]), 1) == 0.0


# k-means -----------------------------------------------------------------------

def test_kmeans_separates_distant_clusters():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0, 0.1, size=(30, 3)), rng.normal(10, 0.1, size=(20, 3))])
    labels = kmeans_partition(X, 2, seed=1)
    assert np.all(labels[:30] == 0) and np.all(labels[30:] == 1)


def test_kmeans_edge_k():
    X = np.random.default_rng(0).normal(size=(7, 2))
    assert np.array_equal(kmeans_partition(X, 1), np.zeros(7, dtype=int))
    assert np.array_equal(kmeans_partition(X, 7), np.arange(7))
    with pytest.raises(ParameterError):
        kmeans_partition(X, 8)


@settings(max_examples=20)
@given(st.integers(0, 2**31), st.integers(2, 6))
def test_kmeans_clusters_are_non_empty_and_deterministic(seed, k):
    rng = np.random.default_rng(seed)
    X = np.round(rng.normal(size=(12, 2)), 0)  # many duplicate points
    a = kmeans_partition(X, k, seed=seed)
    assert np.array_equal(a, kmeans_partition(X, k, seed=seed))
    assert set(a) == set(range(k))
    _, first = np.unique(a, return_index=True)
    assert list(a[np.sort(first)]) == list(range(k))


# projection experiment -----------------------------------------------------------

def test_experiment_without_structure_agrees_everywhere():
    spec = SimSpec(n_individuals=600, n_variants=1000, n_causal=10, reference_size=30,
                   effect_size_sd=1.0, effect_distribution="signed", seed=4, **FLAT)
    rep = run_projection_experiment(3, spec, 2, m_values=(10,))
    assert rep.median_concordance("projection", 10) >= 0.9
    assert rep.median_concordance("none", 10) >= 0.9


def test_experiment_orders_projection_above_none():
    spec = SimSpec(n_individuals=600, n_variants=600, reference_size=40, seed=8)
    for matched in (True, False):
        rep = run_projection_experiment(3, spec, 4, matched, m_values=(20,))
        assert rep.median_concordance("projection", 20) > rep.median_concordance("none", 20)
        d = rep.to_dict()
        assert d["n_studies"] == 3 and d["matched_reference"] is matched
