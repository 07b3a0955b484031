import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kronsep.data import DistanceScale
from kronsep.errors import DomainError, NegativeDistance
from kronsep.lear import LearParams, NullParams, lear_corr, lear_corr_grad, lear_exponent

POINTS = np.array([0.0, 1.0, 2.5, 6.0])
DISTS = np.abs(POINTS[:, None] - POINTS[None, :])
SCALE = DistanceScale(1.0, 6.0)


def test_ar1_special_case():
    # delta equal to the span gives rho ** d
    c = lear_corr(DISTS, SCALE, LearParams(0.7, SCALE.span))
    assert np.allclose(c, 0.7 ** DISTS)


def test_compound_symmetry_special_case():
    c = lear_corr(DISTS, SCALE, LearParams(0.6, 0.0))
    off = ~np.eye(4, dtype=bool)
    assert np.allclose(c[off], 0.6 ** SCALE.d_min)
    assert np.allclose(np.diag(c), 1.0)


def test_rho_zero_is_identity():
    assert np.array_equal(lear_corr(DISTS, SCALE, LearParams(0.0, 2.0)), np.eye(4))


def test_equal_min_and_max_distance():
    d = np.array([[0.0, 2.0], [2.0, 0.0]])
    scale = DistanceScale(2.0, 2.0)
    assert np.allclose(lear_exponent(d, scale, 5.0), 2.0)
    assert lear_corr(d, scale, LearParams(0.5, 5.0))[0, 1] == pytest.approx(0.25)


def test_large_delta_has_finite_entries():
    c = lear_corr(DISTS, SCALE, LearParams(0.3, 500.0))
    assert np.all(np.isfinite(c)) and np.allclose(np.diag(c), 1.0)


@settings(max_examples=60)
@given(st.floats(0.05, 0.95), st.floats(0.0, 10.0))
def test_lear_corr_symmetric_unit_diagonal_bounded(rho, delta):
    c = lear_corr(DISTS, SCALE, LearParams(rho, delta))
    assert np.allclose(c, c.T)
    assert np.allclose(np.diag(c), 1.0)
    off = c[~np.eye(4, dtype=bool)]
    assert np.all((off > 0) & (off <= rho ** SCALE.d_min + 1e-15))


@settings(max_examples=60)
@given(st.floats(0.05, 0.95), st.floats(0.0, 8.0))
def test_lear_corr_monotone_in_distance(rho, delta):
    c = lear_corr(DISTS, SCALE, LearParams(rho, delta))
    d = DISTS[0, 1:]
    r = c[0, 1:]
    order = np.argsort(d)
    assert np.all(np.diff(r[order]) <= 1e-15)


@settings(max_examples=60)
@given(st.floats(0.05, 0.95), st.floats(0.05, 8.0))
def test_gradient_matches_central_differences(rho, delta):
    d_rho, d_delta = lear_corr_grad(DISTS, SCALE, LearParams(rho, delta))
    h = 1e-6
    fd_rho = (lear_corr(DISTS, SCALE, LearParams(rho + h, delta))
              - lear_corr(DISTS, SCALE, LearParams(rho - h, delta))) / (2 * h)
    fd_delta = (lear_corr(DISTS, SCALE, LearParams(rho, delta + h))
                - lear_corr(DISTS, SCALE, LearParams(rho, delta - h))) / (2 * h)
    assert np.max(np.abs(d_rho - fd_rho)) < 1e-6
    assert np.max(np.abs(d_delta - fd_delta)) < 1e-6
    assert np.all(np.diag(d_rho) == 0) and np.all(np.diag(d_delta) == 0)


def test_gradient_requires_positive_rho():
    with pytest.raises(DomainError):
        lear_corr_grad(DISTS, SCALE, LearParams(0.0, 1.0))


@pytest.mark.parametrize("rho,delta", [(1.0, 1.0), (-0.1, 1.0), (0.5, -1.0), (0.5, float("inf"))])
def test_params_domain(rho, delta):
    with pytest.raises(DomainError):
        LearParams(rho, delta)


def test_null_params():
    p = NullParams(LearParams(0.8, 0.5), LearParams(0.7, 1.0), 2.0)
    assert p.as_dict() == {"rho_t": 0.8, "delta_t": 0.5, "rho_s": 0.7, "delta_s": 1.0, "sigma2": 2.0}
    with pytest.raises(DomainError):
        NullParams(LearParams(0.8, 0.5), LearParams(0.7, 1.0), 0.0)


def test_negative_distance_rejected():
    with pytest.raises(NegativeDistance):
        lear_corr(-DISTS, SCALE, LearParams(0.5, 1.0))
