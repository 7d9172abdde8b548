import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glmmr2.covariance import (
    CovarianceKind,
    CovarianceStructure,
    alpha_from_sigma,
    build_sigma,
    cholesky_factor,
    default_alpha,
    is_spd,
    log_normal_density,
)
from glmmr2.errors import DimensionError, NotPositiveDefiniteError

KINDS = [
    CovarianceStructure(CovarianceKind.SCALAR, 1),
    CovarianceStructure(CovarianceKind.DIAGONAL, 2),
    CovarianceStructure(CovarianceKind.DIAGONAL, 3),
    CovarianceStructure(CovarianceKind.UNSTRUCTURED, 1),
    CovarianceStructure(CovarianceKind.UNSTRUCTURED, 2),
    CovarianceStructure(CovarianceKind.UNSTRUCTURED, 3),
]


class TestBuildSigma:
    def test_scalar_zero(self):
        s = CovarianceStructure("scalar", 1)
        np.testing.assert_array_equal(build_sigma(s, [0.0]), [[1.0]])

    def test_unstructured_m2(self):
        s = CovarianceStructure("unstructured", 2)
        sigma = build_sigma(s, [math.log(1.0), 0.5, math.log(1.0)])
        np.testing.assert_allclose(sigma, [[1.0, 0.5], [0.5, 1.25]], atol=1e-15)

    def test_diagonal_identity(self):
        s = CovarianceStructure("diagonal", 2)
        np.testing.assert_array_equal(build_sigma(s, [0.0, 0.0]), np.eye(2))

    def test_diagonal_uses_exp_2alpha(self):
        s = CovarianceStructure("diagonal", 2)
        np.testing.assert_allclose(np.diag(build_sigma(s, [0.5, -1.0])), np.exp([1.0, -2.0]))

    @pytest.mark.parametrize("s", KINDS, ids=lambda s: f"{s.kind.value}{s.m}")
    def test_length_mismatch(self, s):
        with pytest.raises(DimensionError):
            build_sigma(s, np.zeros(s.n_params + 1))

    def test_parameter_counts(self):
        assert [s.n_params for s in KINDS] == [1, 2, 3, 1, 3, 6]

    def test_scalar_requires_m1(self):
        with pytest.raises(DimensionError):
            CovarianceStructure("scalar", 2)

    def test_diag_index(self):
        s = CovarianceStructure("unstructured", 3)
        np.testing.assert_array_equal(s.diag_index, [0, 2, 5])
        L = cholesky_factor(s, np.arange(6.0))
        np.testing.assert_allclose(np.diag(L), np.exp([0.0, 2.0, 5.0]))

    def test_default_alpha(self):
        for s in KINDS:
            np.testing.assert_allclose(build_sigma(s, default_alpha(s)), 0.25 * np.eye(s.m), atol=1e-15)


@pytest.mark.parametrize("s", KINDS, ids=lambda s: f"{s.kind.value}{s.m}")
def test_random_draws_are_spd(s):
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        sigma = build_sigma(s, rng.uniform(-3, 3, s.n_params))
        assert np.array_equal(sigma, sigma.T)
        assert is_spd(sigma)


@pytest.mark.parametrize("s", KINDS, ids=lambda s: f"{s.kind.value}{s.m}")
def test_random_draws_roundtrip(s):
    # On [-3, 3]^6 an m=3 factor can pair diagonals near e^-3 with
    # off-diagonals near 3; cond(Sigma) then reaches ~1e9 and merely rounding
    # Sigma to double moves alpha by ~1e-10. [-2, 2] keeps cond(Sigma) modest.
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        alpha = rng.uniform(-2, 2, s.n_params)
        np.testing.assert_allclose(alpha_from_sigma(s, build_sigma(s, alpha)), alpha, rtol=0, atol=1e-10)


@settings(max_examples=200)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_unstructured_roundtrip_property(alpha):
    s = CovarianceStructure("unstructured", 2)
    np.testing.assert_allclose(alpha_from_sigma(s, build_sigma(s, alpha)), alpha, atol=1e-10)


class TestAlphaFromSigma:
    def test_not_pd(self):
        s = CovarianceStructure("unstructured", 2)
        with pytest.raises(NotPositiveDefiniteError):
            alpha_from_sigma(s, [[1.0, 2.0], [2.0, 1.0]])

    def test_diagonal_rejects_off_diagonal(self):
        s = CovarianceStructure("diagonal", 2)
        with pytest.raises(ValueError):
            alpha_from_sigma(s, [[1.0, 0.1], [0.1, 1.0]])


class TestLogNormalDensity:
    def test_standard_mode(self):
        assert log_normal_density([0.0], [[1.0]]) == pytest.approx(-0.918939, abs=1e-6)

    def test_standard_at_one(self):
        assert log_normal_density([1.0], [[1.0]]) == pytest.approx(-1.418939, abs=1e-6)

    def test_bivariate_mode(self):
        assert log_normal_density([0.0, 0.0], np.eye(2)) == pytest.approx(-1.837877, abs=1e-6)

    def test_matches_scipy(self):
        from scipy.stats import multivariate_normal

        sigma = np.array([[2.0, 0.3, 0.1], [0.3, 1.0, -0.2], [0.1, -0.2, 0.5]])
        u = np.array([0.4, -1.0, 0.7])
        assert log_normal_density(u, sigma) == pytest.approx(
            multivariate_normal(np.zeros(3), sigma).logpdf(u), abs=1e-12
        )

    def test_not_pd(self):
        with pytest.raises(NotPositiveDefiniteError):
            log_normal_density([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    @pytest.mark.parametrize("sd", [0.1, 1.0, 7.5])
    def test_integrates_to_one(self, sd):
        u = np.linspace(-10 * sd, 10 * sd, 20001)
        dens = np.exp([log_normal_density([v], [[sd * sd]]) for v in u])
        assert np.trapezoid(dens, u) == pytest.approx(1.0, abs=1e-8)
