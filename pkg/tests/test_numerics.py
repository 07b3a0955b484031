import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kronsep.errors import DimensionMismatch, DomainError, NotPositiveDefinite
from kronsep.numerics import (
    RngStream,
    chi2_isf,
    chi2_sf,
    cholesky,
    digamma,
    kron,
    kron_logdet,
    log_det_pd,
    mvn_sample,
    solve_pd,
)


def random_pd(rng, k):
    a = rng.normal(size=(k, k))
    return a @ a.T + k * np.eye(k)


@given(st.integers(1, 8), st.integers(0, 10_000))
def test_cholesky_reconstructs(k, seed):
    a = random_pd(np.random.default_rng(seed), k)
    f = cholesky(a)
    assert np.all(np.diag(f.lower) > 0)
    assert np.allclose(f.reconstruct(), a, rtol=1e-12, atol=1e-12)
    assert np.allclose(np.triu(f.lower, 1), 0.0)


def test_cholesky_rejects_bad_input():
    with pytest.raises(NotPositiveDefinite):
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NotPositiveDefinite):
        cholesky(np.zeros((2, 2)))
    with pytest.raises(DomainError):
        cholesky(np.array([[2.0, 1.0], [0.0, 2.0]]))
    with pytest.raises(DimensionMismatch):
        cholesky(np.ones((2, 3)))
    with pytest.raises(NotPositiveDefinite):
        cholesky(np.array([[np.nan, 0.0], [0.0, 1.0]]))


@given(st.integers(1, 7), st.integers(0, 10_000))
def test_log_det_and_solve(k, seed):
    rng = np.random.default_rng(seed)
    a = random_pd(rng, k)
    f = cholesky(a)
    assert log_det_pd(f) == pytest.approx(np.linalg.slogdet(a)[1], rel=1e-12, abs=1e-12)
    b = rng.normal(size=(k, 2))
    assert np.allclose(a @ solve_pd(f, b), b, atol=1e-9)


def test_solve_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        solve_pd(cholesky(np.eye(3)), np.ones(2))


def test_kron_block_layout():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[0.0, 5.0], [6.0, 7.0]])
    k = kron(a, b)
    for j in range(2):
        for l in range(2):
            assert np.array_equal(k[2 * j:2 * j + 2, 2 * l:2 * l + 2], a[j, l] * b)


@settings(max_examples=50)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_kron_logdet_matches_direct(t, s, seed):
    rng = np.random.default_rng(seed)
    g, o = random_pd(rng, t), random_pd(rng, s)
    assert kron_logdet(g, o) == pytest.approx(np.linalg.slogdet(np.kron(g, o))[1], abs=1e-8)


@pytest.mark.parametrize("x", [1e-3, 0.1, 0.5, 1.0, 2.5, 7.0, 33.3, 1e4])
def test_digamma_matches_mpmath(x):
    assert digamma(x) == pytest.approx(float(mpmath.digamma(x)), rel=1e-13, abs=1e-13)


@given(st.floats(1e-2, 1e3))
def test_digamma_recurrence(x):
    assert digamma(x + 1.0) - digamma(x) == pytest.approx(1.0 / x, abs=1e-10)


def test_digamma_known_values():
    euler_gamma = 0.5772156649015329
    assert digamma(1.0) == pytest.approx(-euler_gamma, abs=1e-14)
    assert digamma(0.5) == pytest.approx(-euler_gamma - 2 * math.log(2), abs=1e-14)


@pytest.mark.parametrize("x", [0.0, -1.0, float("nan"), float("inf")])
def test_digamma_domain(x):
    with pytest.raises(DomainError):
        digamma(x)


@given(st.floats(0.0, 200.0))
def test_chi2_sf_two_df_is_exponential(x):
    assert chi2_sf(x, 2) == pytest.approx(math.exp(-x / 2), rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("x,nu", [(1.0, 1), (3.84, 1), (93.9, 73), (633.5, 401), (10.0, 30), (0.01, 5)])
def test_chi2_sf_matches_mpmath(x, nu):
    expected = float(mpmath.gammainc(nu / 2, x / 2, mpmath.inf, regularized=True))
    assert chi2_sf(x, nu) == pytest.approx(expected, rel=1e-10)


def test_chi2_sf_quadrature_oracle():
    # independent route: integrate the chi-square density numerically
    nu, x = 7, 9.3
    dens = lambda u: u ** (nu / 2 - 1) * mpmath.e ** (-u / 2) / (2 ** (nu / 2) * mpmath.gamma(nu / 2))  # noqa: E731
    assert chi2_sf(x, nu) == pytest.approx(float(mpmath.quad(dens, [x, mpmath.inf])), rel=1e-10)


def test_chi2_sf_edges_and_domain():
    assert chi2_sf(0.0, 3) == 1.0
    assert chi2_sf(1e5, 3) == 0.0
    with pytest.raises(DomainError):
        chi2_sf(-1.0, 2)
    with pytest.raises(DomainError):
        chi2_sf(1.0, 0)


@given(st.floats(1e-6, 1 - 1e-6), st.integers(1, 500))
def test_chi2_isf_inverts_sf(q, nu):
    assert chi2_sf(chi2_isf(q, nu), nu) == pytest.approx(q, rel=1e-8)


def test_rng_stream_reproducible_and_distinct():
    a = RngStream(42, 3).normal(1000)
    b = RngStream(42, 3).normal(1000)
    c = RngStream(42, 4).normal(1000)
    d = RngStream(43, 3).normal(1000)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    assert abs(np.corrcoef(a, c)[0, 1]) < 0.15


def test_rng_stream_choice_and_integers():
    rng = RngStream(1, 0)
    for _ in range(50):
        pick = rng.choice(10, 4)
        assert len(set(pick.tolist())) == 4
        assert all(0 <= v < 10 for v in pick)
    draws = rng.integers(1, 3, size=3000)
    assert set(draws.tolist()) == {1, 2, 3}


def test_mvn_sample_covariance_converges():
    rng = np.random.default_rng(5)
    cov = random_pd(rng, 4) / 4
    mean = np.array([1.0, -2.0, 0.5, 0.0])
    draws = mvn_sample(mean, cholesky(cov), RngStream(7, 0), size=100_000)
    assert draws.shape == (100_000, 4)
    assert np.max(np.abs(np.cov(draws.T) - cov)) < 0.05
    assert np.max(np.abs(draws.mean(axis=0) - mean)) < 0.05


def test_mvn_sample_single_and_mismatch():
    x = mvn_sample(np.zeros(3), cholesky(np.eye(3)), RngStream(0, 0))
    assert x.shape == (3,)
    with pytest.raises(DimensionMismatch):
        mvn_sample(np.zeros(2), cholesky(np.eye(3)), RngStream(0, 0))
