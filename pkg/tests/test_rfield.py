import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from kylelab.core import stream
from kylelab.dist import Lognormal, LognormalMixture, Normal
from kylelab.rfield import RField, gauss_hermite, gaussian_panels

MIX3 = LognormalMixture((1.0, 1.0, 1.0), (0.2, 0.5, 0.9), (0.3, 0.4, 0.3))


def test_quadrature_rules_integrate_gaussian_moments():
    for z, w in (gauss_hermite(32), gaussian_panels(64)):
        assert w.sum() == pytest.approx(1.0, abs=1e-14)
        assert np.sum(w * z**2) == pytest.approx(1.0, abs=1e-12)
        assert np.sum(w * z**4) == pytest.approx(3.0, abs=1e-11)


def test_normal_field_closed_form():
    f = RField(Normal(0.0, 1.0))
    u, xi = np.array([0.0, 0.3, 1.0]), np.array([0.5, -1.0, 0.0])
    np.testing.assert_allclose(f.R(u, xi), (xi**2 + u) / 2, atol=1e-14)
    assert f.R(1.0, 0.0) == pytest.approx(0.5, abs=1e-15)
    assert f.R(0.0, 0.0) == 0.0
    np.testing.assert_allclose(f.R_xi(u, xi), xi, atol=1e-14)
    np.testing.assert_allclose(f.R_xixi(u, xi), 1.0, atol=1e-10)
    g = RField(Normal(2.0, 3.0))
    np.testing.assert_allclose(g.R_xi(u, xi), 3 * xi + 2, atol=1e-13)
    np.testing.assert_allclose(g.R_xixi(u, xi), 3.0, atol=1e-12)


def test_lognormal_field_closed_form():
    m, s = 1.4, 0.5
    f = RField(Lognormal(m, s))
    u = np.linspace(0, 1, 11)
    xi = np.linspace(-2, 2, 11)
    closed = m * np.exp(0.5 * s**2 * (u - 1) + s * xi)
    np.testing.assert_allclose(f.R_xi(u, xi), closed, rtol=1e-13)
    np.testing.assert_allclose(f.R_xixi(u, xi), s * closed, rtol=1e-12)


def test_initial_condition():
    x = np.linspace(-3, 3, 7)
    for law in (Normal(), Lognormal(1.0, 0.5), MIX3):
        f = RField(law)
        np.testing.assert_allclose(f.R_xi(np.zeros_like(x), x), law.transport_map(x), rtol=1e-11)
        np.testing.assert_allclose(f.R(np.zeros_like(x), x), law.antiderivative(x), rtol=1e-11, atol=1e-14)


def test_lognormal_R_against_monte_carlo():
    law = Lognormal(1.0, 0.5)
    f = RField(law)
    z = stream(0, 99, 0).standard_normal(10_000_000)
    a = law.antiderivative(0.3 + math.sqrt(0.5) * z)
    se = a.std(ddof=1) / math.sqrt(a.size)
    assert abs(a.mean() - float(f.R(0.5, 0.3))) < 3 * se


def test_conjugate():
    f = RField(Normal())
    v = np.array([-1.0, 0.0, 2.5])
    np.testing.assert_allclose(f.R_conjugate(v), v**2 / 2, atol=1e-14)
    for law in (Lognormal(1.0, 0.5), MIX3):
        g = RField(law)
        assert float(g.R_conjugate(law.transport_map(0.0))) == pytest.approx(0.0, abs=1e-14)
    lg = Lognormal(1.0, 1.0)
    g = RField(lg)
    res = minimize_scalar(lambda x: -(x * 1.0 - lg.antiderivative(x)), bracket=(-1, 1), method="golden", tol=1e-12)
    assert float(g.R_conjugate(1.0)) == pytest.approx(-res.fun, abs=1e-8)


def test_heat_residuals():
    u = np.linspace(0.05, 0.95, 20)[:, None] * np.ones((1, 20))
    xi = np.linspace(-3, 3, 20)[None, :] * np.ones((20, 1))
    assert np.max(np.abs(RField(Normal()).heat_residual(u, xi))) <= 1e-9
    r = RField(Lognormal(1.0, 0.5)).heat_residual(u, xi, du=1e-4, dxi=1e-4)
    assert np.max(np.abs(r)) <= 1e-6
    assert abs(float(RField(MIX3).heat_residual(0.99, 0.0, du=1e-3))) <= 1e-5


def test_mixture_field_matches_adaptive_quadrature():
    from scipy.integrate import quad

    f = RField(MIX3)
    for u, xi in ((0.3, 0.5), (1.0, -1.0), (0.8, 2.0)):
        ref = quad(lambda y: MIX3.transport_map(xi + math.sqrt(u) * y) * math.exp(-y * y / 2) / math.sqrt(2 * math.pi),
                   -12, 13, epsabs=1e-14, epsrel=1e-13, limit=400)[0]
        assert float(f.R_xi(u, xi)) == pytest.approx(ref, rel=1e-11)


def test_gap_mixture_uses_exact_solver_on_flagged_cells():
    law = LognormalMixture((1.628, 0.637, 0.8), (0.039, 0.039, 0.039), (0.5, 0.25, 0.25))
    f = RField(law)
    assert f.table.flagged_cells > 0
    x = np.linspace(-0.05, 0.05, 201)
    np.testing.assert_allclose(f.h(x), law.transport_map(x), rtol=1e-11)


def test_domain_errors():
    f = RField(Normal())
    with pytest.raises(ValueError):
        f.R(1.5, 0.0)
    with pytest.raises(ValueError):
        f.R_xi(-0.1, 0.0)
    with pytest.raises(ValueError):
        RField(Normal(), order=8)
