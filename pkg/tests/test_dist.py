import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from kylelab.dist import Lognormal, LognormalMixture, Normal, sample_v

MIX = LognormalMixture((1.0, 2.0), (0.5, 0.5), (0.5, 0.5))
MIX3 = LognormalMixture((1.0, 1.0, 1.0), (0.2, 0.5, 0.9), (0.3, 0.4, 0.3))


def test_cdf_examples():
    assert Lognormal(1.0, 1.0).cdf(math.exp(-0.5)) == pytest.approx(0.5, abs=1e-15)
    assert Normal(0.0, 1.0).cdf(0.0) == 0.5
    assert MIX.cdf(1e12) == pytest.approx(1.0, abs=1e-15)


def test_closed_form_transport():
    x = np.linspace(-4, 4, 9)
    np.testing.assert_allclose(Normal(2.0, 3.0).transport_map(x), 3.0 * x + 2.0, rtol=1e-15)
    np.testing.assert_allclose(Lognormal(1.5, 0.3).transport_map(x), 1.5 * np.exp(-0.045 + 0.3 * x), rtol=1e-14)
    assert Lognormal(1.5, 0.3).inverse_transport(1.5 * math.exp(-0.045)) == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(Normal().inverse_transport(x), x)


def test_mixture_median_and_roundtrip():
    assert MIX3.cdf(MIX3.transport_map(0.0)) == pytest.approx(0.5, abs=1e-13)
    assert MIX3.inverse_transport(MIX3.transport_map(1.3)) == pytest.approx(1.3, abs=1e-8)
    x = np.linspace(-8, 8, 161)
    np.testing.assert_allclose(MIX3.inverse_transport(MIX3.transport_map(x)), x, atol=1e-12)


def test_mixture_transport_matches_cdf_equation():
    x = np.linspace(-6, 6, 25)
    np.testing.assert_allclose(MIX3.cdf(MIX3.transport_map(x)), stats.norm.cdf(x), rtol=1e-12, atol=1e-300)


def test_single_component_mixture_is_lognormal():
    x = np.linspace(-10, 10, 41)
    np.testing.assert_allclose(LognormalMixture((1.3,), (0.4,), (1.0,)).transport_map(x),
                               Lognormal(1.3, 0.4).transport_map(x), rtol=1e-13)


def test_derivatives_match_finite_differences():
    x = np.linspace(-3, 3, 13)
    d = 1e-5
    for law in (Normal(1.0, 2.0), Lognormal(1.0, 0.4), MIX3):
        fd = (law.transport_map(x + d) - law.transport_map(x - d)) / (2 * d)
        np.testing.assert_allclose(law.h_prime(x), fd, rtol=1e-7)
        fd2 = (law.h_prime(x + d) - law.h_prime(x - d)) / (2 * d)
        np.testing.assert_allclose(law.h_second(x), fd2, rtol=1e-6, atol=1e-9)


def test_antiderivative():
    x = np.array([-2.0, 0.0, 1.5])
    np.testing.assert_allclose(Normal().antiderivative(x), x**2 / 2, atol=1e-15)
    lg = Lognormal(1.0, 0.5)
    np.testing.assert_allclose(lg.antiderivative(x), (lg.transport_map(x) - lg.transport_map(0.0)) / 0.5, rtol=1e-13)
    # Quadrature oracle for the mixture.
    from scipy.integrate import quad

    assert MIX3.antiderivative(np.array([1.7]))[0] == pytest.approx(quad(MIX3.transport_map, 0, 1.7, epsabs=1e-14)[0],
                                                                    rel=1e-12)


def test_domain_errors():
    with pytest.raises(ValueError):
        Lognormal(1.0, 0.5).inverse_transport(-1.0)
    with pytest.raises(ValueError):
        MIX3.inverse_transport(0.0)
    with pytest.raises(ValueError):
        LognormalMixture((1.0, 1.0), (0.2, 0.3), (0.5, 0.6))
    with pytest.raises(ValueError):
        Lognormal(1.0, -0.1)


def test_sampling():
    z, v = sample_v(Normal(), seed=1, n_paths=100)
    np.testing.assert_array_equal(z, v)
    _, v = sample_v(Lognormal(1.0, 0.5), seed=2, n_paths=100_000)
    assert abs(v.mean() - 1.0) < 3 * v.std(ddof=1) / math.sqrt(v.size)
    _, v = sample_v(MIX3, seed=3, n_paths=20_000)
    assert stats.kstest(v, MIX3.cdf).pvalue > 0.05
    z1, _ = sample_v(MIX3, seed=3, n_paths=10, first_path=5)
    z2, _ = sample_v(MIX3, seed=3, n_paths=15)
    np.testing.assert_array_equal(z1, z2[5:])


def test_expected_values():
    assert Lognormal(1.7, 0.3).expected_value == pytest.approx(1.7)
    assert MIX3.expected_value == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(x=st.floats(-8, 8), s1=st.floats(0.05, 1.5), s2=st.floats(0.05, 1.5), w=st.floats(0.05, 0.95))
def test_mixture_transport_is_monotone_and_invertible(x, s1, s2, w):
    law = LognormalMixture((1.0, 1.5), (s1, s2), (w, 1 - w))
    y = law.transport_map(np.array([x, x + 0.01]))
    assert y[1] > y[0] > 0
    assert law.inverse_transport(y[:1])[0] == pytest.approx(x, abs=1e-9)
