import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from galamm import autodiff as ad
from galamm.families import BINOMIAL, GAUSSIAN, get_family, log_density, mean_and_weight


def test_gaussian_density_matches_scipy(rng):
    y = rng.normal(size=10)
    nu = rng.normal(size=10)
    phi = 0.7
    np.testing.assert_allclose(log_density("gaussian", y, 1, nu, phi), stats.norm.logpdf(y, nu, np.sqrt(phi)), rtol=1e-12)


def test_binomial_density_matches_scipy(rng):
    m = rng.integers(1, 20, size=10)
    y = rng.binomial(m, 0.4)
    nu = rng.normal(size=10)
    ref = stats.binom.logpmf(y, m, 1 / (1 + np.exp(-nu)))
    # phi is ignored for the binomial family
    np.testing.assert_allclose(log_density(BINOMIAL, y, m, nu, 3.0), ref, rtol=1e-10)


def test_aliases_and_unknown():
    assert get_family("Binomial-logit") is BINOMIAL
    assert get_family("gaussian-identity") is GAUSSIAN
    with pytest.raises(ValueError):
        get_family("poisson")
    with pytest.raises(ValueError):
        log_density("gaussian", [0.0], 1, [0.0], 0.0)


def test_link_roundtrip():
    mu = np.array([0.1, 3.0, 7.9])
    np.testing.assert_allclose(BINOMIAL.inverse_link(BINOMIAL.link(mu, 8), 8), mu)
    np.testing.assert_allclose(GAUSSIAN.inverse_link(GAUSSIAN.link(mu)), mu)


def test_weight_scaled_by_phi():
    mu, v = mean_and_weight("gaussian", np.array([1.0, 2.0]), 1, 0.5)
    np.testing.assert_allclose(mu, [1.0, 2.0])
    np.testing.assert_allclose(v, [2.0, 2.0])


@settings(max_examples=60, deadline=None)
@given(st.floats(-8, 8), st.integers(1, 30))
def test_property_cumulant_derivatives(nu, m):
    # mean and variance are the first two derivatives of the cumulant
    for fam in (GAUSSIAN, BINOMIAL):
        x = ad.Dual.seed(np.array([nu]), first=[0], second=[0])
        d = fam.cumulant(x, m)
        assert d.d1[0, 0] == pytest.approx(float(fam.mean(np.array([nu]), m)[0]), rel=1e-10, abs=1e-12)
        assert d.d2[0, 0, 0] == pytest.approx(float(fam.variance(np.array([nu]), m)[0]), rel=1e-9, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.integers(1, 25))
def test_property_binomial_normalised(nu, m):
    y = np.arange(m + 1)
    total = np.exp(log_density(BINOMIAL, y, m, np.full(m + 1, nu))).sum()
    assert total == pytest.approx(1.0, rel=1e-10)
