import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from ncchi_mpm.distributions import (SMALL_Z, Family, NoiseModel, chi_logpdf, gaussian_logpdf,
                                     ncchi_logpdf, ncchi_mean)
from ncchi_mpm.special import DomainError


def ncx2_logpdf(x, mu, nu, s2):
    # X^2 / s2 is noncentral chi-squared with nu dof and noncentrality mu^2 / s2
    y = x * x / s2
    return stats.ncx2.logpdf(y, nu, mu * mu / s2) + np.log(2 * x / s2)


def test_family_parse():
    assert Family.parse("gaussian") is Family.GAUSSIAN
    assert Family.parse("NC-CHI") is Family.NCCHI
    assert Family.parse(Family.CHI) is Family.CHI
    with pytest.raises(ValueError):
        Family.parse("poisson")


def test_noise_model_validation_and_roundtrip():
    m = NoiseModel("ncchi", 3.5, 2.25)
    assert m.sigma == 1.5
    assert NoiseModel.from_dict(m.to_dict()) == m
    with pytest.raises(ValueError):
        NoiseModel("ncchi", 2.0, 0.0)
    with pytest.raises(ValueError):
        NoiseModel("chi", -1.0, 1.0)
    NoiseModel("gauss", float("nan"), 1.0)  # nu unused for the Gaussian


def test_rice_matches_scipy():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.01, 20, 500)
    mu = rng.uniform(0.01, 15, 500)
    s = rng.uniform(0.3, 4, 500)
    ref = stats.rice.logpdf(x, mu / s, scale=s)
    np.testing.assert_allclose(ncchi_logpdf(x, mu, 2.0, s * s), ref, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("nu", [1.0, 1.7, 2.0, 4.0, 9.3, 32.0])
def test_ncchi_matches_ncx2(nu):
    x = np.array([0.05, 0.5, 1.0, 3.0, 7.0, 12.0])
    for mu in [0.2, 1.0, 5.0, 10.0]:
        np.testing.assert_allclose(ncchi_logpdf(x, mu, nu, 1.7), ncx2_logpdf(x, mu, nu, 1.7),
                                   rtol=1e-8, atol=1e-8)


def test_chi_matches_scipy():
    x = np.linspace(0.01, 10, 50)
    for nu in [0.6, 1, 2, 5.5, 30]:
        np.testing.assert_allclose(chi_logpdf(x, nu, 2.0), stats.chi.logpdf(x, nu, scale=np.sqrt(2.0)),
                                   rtol=1e-11, atol=1e-11)


def test_chi_at_zero():
    assert chi_logpdf(0.0, 2.0, 1.0) == -np.inf
    assert chi_logpdf(0.0, 1.0, 1.0) == pytest.approx(np.log(np.sqrt(2 / np.pi)))
    with pytest.raises(DomainError):
        chi_logpdf(0.0, 0.5, 1.0)
    with pytest.raises(DomainError):
        chi_logpdf(-1.0, 2.0, 1.0)


def test_ncchi_reduces_to_chi_at_zero_mean():
    x = np.linspace(0.01, 8, 40)
    for nu in [1.0, 2.0, 6.0]:
        np.testing.assert_allclose(ncchi_logpdf(x, 0.0, nu, 1.3), chi_logpdf(x, nu, 1.3), rtol=1e-12)


def test_ncchi_continuous_across_small_z_branch():
    s2, x = 1.0, 1.0
    for nu in [1.0, 2.0, 7.0]:
        lo = ncchi_logpdf(x, SMALL_Z * (1 - 1e-9), nu, s2)
        hi = ncchi_logpdf(x, SMALL_Z * (1 + 1e-9), nu, s2)
        assert abs(lo - hi) < 1e-12
        # small-z branch agrees with the exact density
        mu = 3e-7
        ref = float(mp.log(mp.mpf(x) ** (nu / 2) * mp.mpf(mu) ** (1 - nu / 2)
                           * mp.exp(-(x * x + mu * mu) / 2) * mp.besseli(nu / 2 - 1, mu * x)))
        assert ncchi_logpdf(x, mu, nu, s2) == pytest.approx(ref, abs=1e-13)


@pytest.mark.parametrize("mu,nu,s2", [(0.0, 2.0, 1.0), (3.0, 2.0, 1.0), (1.0, 1.0, 0.5),
                                      (2.0, 7.5, 1.0), (40.0, 2.0, 4.0), (0.5, 24.0, 0.3)])
def test_ncchi_normalised(mu, nu, s2):
    f = lambda x: np.exp(ncchi_logpdf(x, mu, nu, s2))
    hi = mu + 40 * np.sqrt(s2) + 10 * np.sqrt(nu * s2)
    pts = [mu] if mu > 0 else None
    total, _ = integrate.quad(f, 0, hi, points=pts, limit=400, epsabs=1e-13, epsrel=1e-12)
    assert total == pytest.approx(1.0, abs=1e-9)
    mean, _ = integrate.quad(lambda x: x * f(x), 0, hi, points=pts, limit=400, epsrel=1e-12)
    assert ncchi_mean(mu, nu, s2) == pytest.approx(mean, rel=1e-8)


def test_ncchi_mean_limits():
    assert ncchi_mean(0.0, 2.0, 1.0) == pytest.approx(np.sqrt(np.pi / 2), rel=1e-13)
    assert ncchi_mean(1e6, 2.0, 1.0) == pytest.approx(1e6 + 0.5e-6, rel=1e-14)
    with pytest.raises(DomainError):
        ncchi_mean(-1.0, 2.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e4), st.floats(1, 64), st.floats(1e-3, 1e3))
def test_ncchi_mean_bounds(mu, nu, s2):
    # mu <= E[X] (Jensen, nu >= 1) and E[X] <= sqrt(E[X^2]) = sqrt(mu^2 + nu s2)
    m = ncchi_mean(mu, nu, s2)
    assert mu * (1 - 1e-12) <= m <= np.sqrt(mu * mu + nu * s2) * (1 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 50), st.floats(0, 50), st.floats(0.5, 40), st.floats(0.05, 20),
       st.floats(0.1, 10))
def test_ncchi_scale_covariance(x, mu, nu, s2, c):
    # X ~ f(.; mu, s2)  =>  cX ~ f(.; c mu, c^2 s2)
    a = ncchi_logpdf(c * x, c * mu, nu, c * c * s2)
    b = ncchi_logpdf(x, mu, nu, s2) - np.log(c)
    assert a == pytest.approx(b, abs=1e-9 * max(1.0, abs(b)))


def test_gaussian_logpdf():
    assert gaussian_logpdf(1.0, 1.0, 1.0) == pytest.approx(-0.5 * np.log(2 * np.pi))
    np.testing.assert_allclose(gaussian_logpdf([0, 2], 1.0, 4.0), stats.norm.logpdf([0, 2], 1, 2))


def test_noise_model_dispatch():
    x = np.array([0.5, 2.0])
    assert np.allclose(NoiseModel("gauss", 0, 2.0).logpdf(x, 1.0), gaussian_logpdf(x, 1.0, 2.0))
    assert np.allclose(NoiseModel("chi", 3, 2.0).logpdf(x), chi_logpdf(x, 3, 2.0))
    assert np.allclose(NoiseModel("ncchi", 3, 2.0).logpdf(x, 1.0), ncchi_logpdf(x, 1.0, 3, 2.0))
    assert NoiseModel("gauss", 0, 2.0).mean(3.0) == 3.0
