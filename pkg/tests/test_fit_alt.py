import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from kronsep._newton import fd_hessian
from kronsep.data import Dataset
from kronsep.errors import DimensionMismatch, NonConvergence, NotPositiveDefinite, UnidentifiedCell
from kronsep.fit_alt import (
    MaxGridCov,
    _AltObjective,
    available_case_cov,
    fit_alt,
    gls_beta_alt,
    lower_to_theta,
    loglik_alt,
    ridge_to_pd,
    select_submatrix,
    subject_cells,
    theta_to_lower,
)
from kronsep.fit_null import FitOptions, fit_null
from kronsep.simulate import SimConfig, gen_dataset

from conftest import make_subject, random_dataset


def balanced_dataset(seed, N=60, t=2, s=2):
    rng = np.random.default_rng(seed)
    d = t * s
    a = rng.normal(size=(d, d))
    cov = a @ a.T / d + 0.5 * np.eye(d)
    mean = rng.normal(size=d)
    y = rng.multivariate_normal(mean, cov, size=N)
    times, locs = np.arange(t, dtype=float), np.arange(s, dtype=float) * 2
    # saturated mean: one indicator column per cell
    subs = [make_subject(i, y[i], times, range(t), locs, range(s), x=np.eye(d)) for i in range(N)]
    return Dataset(subs, times, locs, intercept=False), y


def test_saturated_mean_matches_closed_form_mle():
    ds, y = balanced_dataset(0)
    fit = fit_alt(ds)
    centred = y - y.mean(axis=0)
    expected = centred.T @ centred / len(y)
    assert fit.converged
    assert np.max(np.abs(fit.cov.matrix() - expected)) < 1e-4
    assert np.allclose(fit.beta, y.mean(axis=0), atol=1e-6)


@settings(max_examples=40)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_log_cholesky_round_trip(d, seed):
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=d * (d + 1) // 2)
    low = theta_to_lower(theta, d)
    assert np.all(np.diag(low) > 0)
    assert np.allclose(lower_to_theta(low), theta)
    cov = MaxGridCov(1, d, theta)
    assert np.min(np.linalg.eigvalsh(cov.matrix())) > 0
    back = MaxGridCov.from_matrix(cov.matrix(), 1, d)
    assert np.allclose(back.theta, theta, atol=1e-8)


def test_identity_and_shape_checks():
    assert np.array_equal(MaxGridCov.identity(2, 3).matrix(), np.eye(6))
    with pytest.raises(DimensionMismatch):
        MaxGridCov(2, 2, np.zeros(3))


def test_select_submatrix_uses_time_major_cells():
    theta = np.random.default_rng(1).normal(size=21)
    cov = MaxGridCov(2, 3, theta)
    sub = make_subject(0, np.zeros(4), [0.0, 5.0], [0, 1], [1.0, 3.0], [1, 2])
    idx = subject_cells(sub, 3)
    assert list(idx) == [1, 2, 4, 5]
    assert np.array_equal(select_submatrix(cov, sub), cov.matrix()[np.ix_(idx, idx)])


def test_loglik_matches_dense_mvn(small_dataset):
    ds = small_dataset
    d = ds.t_max * ds.s_max
    rng = np.random.default_rng(2)
    cov = MaxGridCov(ds.t_max, ds.s_max, 0.3 * rng.normal(size=d * (d + 1) // 2))
    beta = rng.normal(size=ds.p)
    expected = sum(
        multivariate_normal(sub.x @ beta, select_submatrix(cov, sub)).logpdf(sub.y) for sub in ds.subjects
    )
    assert loglik_alt(ds, cov, beta) == pytest.approx(expected, rel=1e-10)
    # the GLS beta maximises the likelihood for fixed covariance
    b = gls_beta_alt(ds, cov)
    assert loglik_alt(ds, cov, b) >= loglik_alt(ds, cov, b + 1e-3)


def _perturbed_start(ds, seed):
    theta = lower_to_theta(np.linalg.cholesky(ridge_to_pd(available_case_cov(ds))))
    return theta + 0.1 * np.random.default_rng(seed).normal(size=theta.size)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_and_hessian_match_finite_differences(seed):
    ds = random_dataset(seed, N=40, grid_times=(0.0, 1.0), grid_locs=(0.0, 1.0, 2.5))
    obj = _AltObjective(ds)
    theta = _perturbed_start(ds, seed)
    h = 1e-6
    eye = np.eye(theta.size)
    fd_g = np.array([(obj.value(theta + h * e) - obj.value(theta - h * e)) / (2 * h) for e in eye])
    g = obj.grad(theta)
    assert np.max(np.abs(g - fd_g)) < 1e-5 * max(1.0, np.max(np.abs(g)))
    fd_h = np.array([(obj.grad(theta + h * e) - obj.grad(theta - h * e)) / (2 * h) for e in eye]).T
    hess = obj.hessian(theta)
    assert np.max(np.abs(hess - fd_h)) < 1e-5 * max(1.0, np.max(np.abs(hess)))
    # the forward-difference helper used elsewhere agrees too
    assert np.max(np.abs(fd_hessian(obj.grad, theta, g, 1e-6) - hess)) < 1e-3 * np.max(np.abs(hess))


def test_available_case_cov_and_ridge(small_dataset):
    cov = available_case_cov(small_dataset)
    assert np.allclose(cov, cov.T)
    pd = ridge_to_pd(cov)
    assert np.min(np.linalg.eigvalsh(pd)) > 0
    assert np.allclose(np.diag(pd) - np.diag(cov), (pd - cov)[0, 0])


def test_ridge_leaves_pd_matrix_alone():
    a = np.eye(3)
    assert ridge_to_pd(a) is a


def test_unobserved_cell_raises():
    subs = [make_subject(i, np.random.default_rng(i).normal(size=2), [0.0], [0], [0.0, 1.0], [0, 1]) for i in range(5)]
    ds = Dataset(subs, [0.0, 1.0], [0.0, 1.0])
    with pytest.raises(UnidentifiedCell) as info:
        available_case_cov(ds)
    assert info.value.cell == (1, 0)


def test_non_finite_theta_rejected():
    with pytest.raises(NotPositiveDefinite):
        MaxGridCov(2, 2, np.full(10, np.nan))


def test_fit_nests_the_null(sim80):
    alt = fit_alt(sim80)
    null = fit_null(sim80)
    assert alt.converged and alt.grad_norm < 1e-6
    assert alt.loglik >= null.loglik - 1e-6
    start = MaxGridCov.from_matrix(np.eye(sim80.t_max * sim80.s_max), sim80.t_max, sim80.s_max)
    again = fit_alt(sim80, start=start)
    assert again.loglik == pytest.approx(alt.loglik, abs=1e-6)


def test_unsupported_unstructured_model_does_not_converge():
    ds = gen_dataset(SimConfig.table1(80, 5, seed=42), 1)
    assert sum(s.t == 5 for s in ds.subjects) < ds.t_max * ds.s_max
    with pytest.raises(NonConvergence) as info:
        fit_alt(ds)
    msg = str(info.value)
    assert "more parsimonious covariance model" in msg
    assert info.value.result is not None and not info.value.result.converged


def test_iteration_limit_reports_nonconvergence(sim80):
    with pytest.raises(NonConvergence):
        fit_alt(sim80, FitOptions(max_iter=1))
