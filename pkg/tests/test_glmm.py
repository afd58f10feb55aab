import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, optimize, special

from fedglmm.exceptions import ParameterError, SingularHessianError
from fedglmm.glmm import (
    P_MIN,
    SIGMA2_FLOOR,
    SiteData,
    compute_site_stats,
    fit_site_random_effect,
    newton_step,
    site_conditional_loglik,
    site_local_stats,
    two_sided_normal_p,
    update_sigma2,
    wald_inference,
)
from helpers import mu_hat_brent, naive_loglik, profile_loglik, random_site

seeds = st.integers(0, 2**32 - 1)


def zero_site(y, p=0):
    y = np.asarray(y, dtype=float)
    return SiteData("rs", np.zeros((y.size, p + 1)), y)


# site_conditional_loglik --------------------------------------------------------

def test_loglik_zero_predictor_closed_form():
    site = zero_site([0, 1])
    val = site_conditional_loglik(site, [0.0], 0.0, 1.0)
    assert val == pytest.approx(2 * math.log(0.5) - 0.5 * math.log(2 * math.pi), abs=1e-12)
    assert val == pytest.approx(-2.30524, abs=1e-5)


def test_loglik_prior_term_at_zero():
    # one observation with y=1 and eta=0 contributes ln(0.5); remove it
    site = zero_site([1])
    prior = site_conditional_loglik(site, [0.0], 0.0, 1.0) - math.log(0.5)
    assert prior == pytest.approx(-0.91894, abs=1e-5)


@given(seeds)
def test_loglik_matches_naive_summation(seed):
    rng = np.random.default_rng(seed)
    site, beta = random_site(rng)
    mu = float(rng.normal())
    s2 = float(rng.uniform(0.05, 3.0))
    assert site_conditional_loglik(site, beta, mu, s2) == pytest.approx(
        naive_loglik(site, beta, mu, s2), rel=1e-12, abs=1e-12)


def test_loglik_is_overflow_safe():
    site = SiteData("rs", np.array([[700.0], [-700.0]]), np.array([0.0, 1.0]))
    val = site_conditional_loglik(site, [1.0], 0.0, 1.0)
    assert math.isfinite(val)
    assert val == pytest.approx(-1400.0 - 0.5 * math.log(2 * math.pi), rel=1e-12)


@pytest.mark.parametrize("bad", [math.nan, math.inf])
def test_loglik_rejects_non_finite(bad):
    with pytest.raises(ParameterError):
        site_conditional_loglik(zero_site([0, 1]), [bad], 0.0, 1.0)


def test_sitedata_validation():
    with pytest.raises(ParameterError):
        SiteData("rs", np.zeros((2, 1)), np.array([0.0, 2.0]))
    with pytest.raises(ParameterError):
        SiteData("rs", np.array([[np.nan], [0.0]]), np.array([0.0, 1.0]))
    with pytest.raises(ParameterError):
        SiteData("rs", np.zeros((0, 1)), np.zeros(0))


# fit_site_random_effect -----------------------------------------------------------

def test_random_effect_symmetric_case():
    mu, curv = fit_site_random_effect(zero_site([1, 0]), [0.0], 1.0)
    assert mu == 0.0
    assert curv == pytest.approx(0.5 + 1.0)


def test_random_effect_matches_bisection():
    mu, _ = fit_site_random_effect(zero_site([1, 1, 0]), [0.0], 1.0)
    root = optimize.bisect(lambda m: 2 - 3 * special.expit(m) - m, -5, 5, xtol=1e-14)
    assert mu == pytest.approx(root, abs=1e-9)
    assert mu == pytest.approx(0.287, abs=1e-3)


def test_random_effect_shrinks_monotonically_with_sigma2():
    site = zero_site([1, 1, 1, 0, 0])
    sigmas = [1.0, 0.1, 0.01, 1e-3, 1e-4, 1e-5, SIGMA2_FLOOR]
    mus = [fit_site_random_effect(site, [0.0], s)[0] for s in sigmas]
    assert all(a > b for a, b in zip(mus, mus[1:]))
    assert abs(mus[-1]) < 1e-5


@given(seeds)
def test_random_effect_matches_root_finder(seed):
    rng = np.random.default_rng(seed)
    site, beta = random_site(rng, scale=2.0)
    s2 = float(rng.uniform(SIGMA2_FLOOR, 5.0))
    mu, curv = fit_site_random_effect(site, beta, s2, mu0=float(rng.normal(0, 3)))
    assert curv > 0
    assert mu == pytest.approx(mu_hat_brent(site, beta, s2), abs=1e-8)


def test_random_effect_is_a_fixed_point():
    rng = np.random.default_rng(5)
    site, beta = random_site(rng, n=30, p=2)
    mu, curv = fit_site_random_effect(site, beta, 0.7)
    assert fit_site_random_effect(site, beta, 0.7, mu0=mu) == (mu, curv)


def test_random_effect_rejects_sigma2_below_floor():
    with pytest.raises(ParameterError):
        fit_site_random_effect(zero_site([0, 1]), [0.0], SIGMA2_FLOOR / 2)


# site_local_stats -------------------------------------------------------------------

def test_local_stats_two_sample_example():
    site = SiteData("rs", np.array([[0.0], [2.0]]), np.array([0.0, 1.0]))
    st_ = site_local_stats(site, [0.0], 1.0, 0.0, 1.5)
    assert st_.gradient == pytest.approx([1.0], abs=1e-15)
    assert st_.hessian[0, 0] == pytest.approx(-1 + 0.25 / 1.5, abs=1e-15)
    assert st_.hessian[0, 0] == pytest.approx(-0.8333, abs=1e-4)
    # finite differences of the profiled log-likelihood
    h = 1e-5
    f = lambda b: profile_loglik(site, np.array([b]), 1.0)  # noqa: E731
    assert (f(h) - f(-h)) / (2 * h) == pytest.approx(1.0, rel=1e-6)
    assert (f(h) - 2 * f(0.0) + f(-h)) / h**2 == pytest.approx(-0.8333333, rel=1e-3)


def test_laplace_example_and_quadrature():
    site = zero_site([0, 1])
    st_ = site_local_stats(site, [0.0], 1.0, 0.0, 1.5)
    expected = -2.30524 + 0.91894 - 0.5 * math.log(1.5)
    assert st_.laplace_loglik == pytest.approx(expected, abs=1e-5)
    assert st_.laplace_loglik == pytest.approx(-1.58902, abs=1e-5)
    val, _ = integrate.quad(lambda m: math.exp(site_conditional_loglik(site, [0.0], m, 1.0)),
                            -np.inf, np.inf, epsabs=0, epsrel=1e-12)
    assert abs(st_.laplace_loglik - math.log(val)) <= 0.02 * abs(math.log(val))


def test_zero_variance_genotype_flags_singular():
    n = 6
    cov = np.random.default_rng(0).normal(size=n)
    y = np.array([0, 1, 0, 1, 1, 0.0])
    site = SiteData("rs", np.column_stack([np.zeros(n), cov]), y)
    st_ = compute_site_stats(site, [0.0, 0.0], 1.0)
    assert st_.gradient[0] == 0.0
    assert st_.singular
    assert np.all(np.isnan(st_.local_se))


def test_constant_genotype_gradient_is_scaled_residual_sum():
    n = 6
    cov = np.random.default_rng(0).normal(size=n)
    y = np.array([0, 1, 1, 1, 1, 0.0])
    site = SiteData("rs", np.column_stack([np.full(n, 2.0), cov]), y)
    st_ = compute_site_stats(site, [0.3, 0.1], 1.0)
    eta = site.design @ [0.3, 0.1] + st_.mu_hat
    assert st_.gradient[0] == pytest.approx(2.0 * np.sum(y - special.expit(eta)), abs=1e-12)
    # the random intercept absorbs most of a constant column's information
    s = compute_site_stats(site, [0.3, 0.1], 1e6)
    assert abs(s.hessian[0, 0]) < 1e-4 * abs(s.hessian[1, 1])


@given(seeds)
def test_local_stats_invariants(seed):
    rng = np.random.default_rng(seed)
    site, beta = random_site(rng)
    s = compute_site_stats(site, beta, float(rng.uniform(0.01, 3)))
    assert np.max(np.abs(s.hessian - s.hessian.T)) <= 1e-10
    assert s.mu_curvature > 0
    assert math.isfinite(s.laplace_loglik) and np.all(np.isfinite(s.gradient))
    assert s.sigma2_moment == pytest.approx(s.mu_hat**2 + 1 / s.mu_curvature, rel=1e-15)


def _fd_check(seed):
    rng = np.random.default_rng(seed)
    site, beta = random_site(rng, n=int(rng.integers(5, 21)), p=int(rng.integers(0, 3)))
    s2 = float(rng.uniform(0.1, 2.0))
    st_ = compute_site_stats(site, beta, s2)
    m = beta.size
    h = 1e-5
    fd_grad = np.empty(m)
    fd_hess = np.empty((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = h
        fd_grad[j] = (profile_loglik(site, beta + e, s2)
                      - profile_loglik(site, beta - e, s2)) / (2 * h)
        gp = compute_site_stats(site, beta + e, s2).gradient
        gm = compute_site_stats(site, beta - e, s2).gradient
        fd_hess[:, j] = (gp - gm) / (2 * h)
    return st_, fd_grad, fd_hess


def rel_err(a, b):
    """Max-norm error of ``a`` relative to the max-norm of ``b``."""
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@given(seeds)
def test_profile_gradient_and_hessian_match_finite_differences(seed):
    st_, fd_grad, fd_hess = _fd_check(seed)
    assert rel_err(st_.gradient, fd_grad) < 1e-5
    assert rel_err(st_.hessian, fd_hess) < 1e-4


# newton_step -------------------------------------------------------------------------

def test_newton_diagonal_example():
    out = newton_step([0.0, 0.0], [1.0, 0.0], np.diag([-2.0, -4.0]))
    assert out == pytest.approx([0.5, 0.0], abs=1e-15)


def test_newton_zero_gradient_is_identity():
    b = np.array([0.3, -1.2])
    assert np.array_equal(newton_step(b, [0.0, 0.0], -np.eye(2)), b)


@given(seeds)
def test_newton_matches_dense_solve(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 7))
    A = rng.normal(size=(m, m))
    spd = A @ A.T + m * np.eye(m)
    g = rng.normal(size=m)
    b = rng.normal(size=m)
    expected = b - np.linalg.solve(-spd, g)
    assert np.max(np.abs(newton_step(b, g, -spd) - expected)) < 1e-10


def test_newton_singular_reports_diagnostics():
    with pytest.raises(SingularHessianError) as err:
        newton_step([0.0, 0.0], [1.0, 1.0], np.array([[-1.0, -1.0], [-1.0, -1.0]]))
    assert err.value.min_eigenvalue == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(SingularHessianError):
        newton_step([0.0], [1.0], np.array([[2.0]]))  # indefinite for ascent


def test_newton_shape_checks():
    with pytest.raises(ParameterError):
        newton_step([0.0, 0.0], [1.0], -np.eye(2))
    with pytest.raises(ParameterError):
        newton_step([0.0, 0.0], [1.0, 1.0], np.array([[-1.0, 0.5], [0.0, -1.0]]))


# update_sigma2 -------------------------------------------------------------------------

def test_sigma2_three_site_example():
    assert update_sigma2([0.3, -0.3, 0.0], [10, 10, 10]) == pytest.approx(0.16, abs=1e-15)


def test_sigma2_floor_engages():
    assert update_sigma2([0.0, 0.0], [1e300, 1e300]) == SIGMA2_FLOOR


def test_sigma2_single_site():
    assert update_sigma2([0.5], [4.0]) == 0.5


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(1e-3, 1e6)), min_size=1, max_size=8))
def test_sigma2_never_below_floor(pairs):
    mus, cs = zip(*pairs)
    assert update_sigma2(mus, cs) >= SIGMA2_FLOOR


def test_sigma2_rejects_bad_input():
    with pytest.raises(ParameterError):
        update_sigma2([], [])
    with pytest.raises(ParameterError):
        update_sigma2([0.1], [0.0])


# wald_inference --------------------------------------------------------------------------

def test_wald_example():
    se, z, p = wald_inference([0.5], np.array([[-1 / 0.0625]]))
    assert se[0] == pytest.approx(0.25, rel=1e-15)
    assert z[0] == pytest.approx(2.0, rel=1e-15)
    assert p[0] == pytest.approx(0.04550, abs=1e-5)


def test_wald_null_gives_one():
    assert two_sided_normal_p(0.0) == 1.0


def test_wald_tail_matches_arbitrary_precision():
    mpmath.mp.dps = 50
    exact = mpmath.erfc(mpmath.mpf(12) / mpmath.sqrt(2))
    got = float(two_sided_normal_p(12.0))
    assert abs(got - float(exact)) / float(exact) < 1e-10


def test_wald_deep_tail_does_not_underflow():
    p = two_sided_normal_p(np.array([13.7, 30.0, 37.5]))
    assert np.all(p > 0)
    assert p[0] == pytest.approx(1.0e-42, rel=0.2)
    assert two_sided_normal_p(60.0) == P_MIN


@given(st.floats(0, 37), st.floats(0, 37))
def test_wald_p_in_range_and_decreasing(a, b):
    pa, pb = two_sided_normal_p(a), two_sided_normal_p(b)
    assert 0 < pa <= 1 and 0 < pb <= 1
    if a < b:
        assert pa >= pb
    if a + 1e-6 < b:
        assert pa > pb
    assert two_sided_normal_p(-a) == pa


def test_wald_rejects_non_pd():
    with pytest.raises(SingularHessianError):
        wald_inference([1.0], np.array([[1.0]]))
