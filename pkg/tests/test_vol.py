import math

import numpy as np
import pytest
from scipy.special import gamma as gamma_fn

from kylelab.core import CH_W, brownian_increments, make_grid
from kylelab.vol import (CIRClamped, Deterministic, LogDiffusion, RoughCIRClamped, cir_mgf, clamp_bounds,
                         exponential_moment, holder_diagnostic, simulate_vol, volterra_weights)


def _dW(grid, n_paths, seed=0):
    return brownian_increments(grid, seed, CH_W, np.arange(n_paths))


def test_deterministic_paths():
    g = make_grid(10)
    v = simulate_vol(Deterministic(), g, _dW(g, 3))
    np.testing.assert_array_equal(v.sigma, 1.0)
    v = simulate_vol(Deterministic((1.0, 2.0), (0.5,)), g, _dW(g, 2))
    np.testing.assert_array_equal(v.sigma[0], np.where(g.nodes < 0.5, 1.0, 2.0))
    assert Deterministic((1.0, 2.0), (0.5,)).integrated_variance(0.0, 1.0) == pytest.approx(2.5)


def test_deterministic_rejects_bad_levels():
    with pytest.raises(ValueError):
        Deterministic((1.0, 2.0), ())
    with pytest.raises(ValueError):
        Deterministic((1.0, 2.0, 3.0), (0.6, 0.4))


def test_cir_fixed_point_mean():
    spec = CIRClamped(a=0.5, k=1.0, eta=0.5, x0=0.5, sigma_low=0.2, sigma_high=1.0)
    g = make_grid(100)
    v = simulate_vol(spec, g, _dW(g, 20_000, seed=4))
    for i in (25, 50, 100):
        x = v.V[:, i]
        assert abs(x.mean() - 0.5) < 3 * x.std(ddof=1) / math.sqrt(x.size)
    assert np.all(v.sigma >= 0.2) and np.all(v.sigma <= 1.2)
    np.testing.assert_array_equal(v.J, v.sigma)
    np.testing.assert_array_equal(v.L, 1.0)


def test_cir_feller_violation():
    with pytest.raises(ValueError):
        CIRClamped(a=0.1, k=1.0, eta=1.0, x0=1.0, sigma_low=0.1, sigma_high=1.0)


def test_cir_mgf_closed_form_cases():
    assert cir_mgf(1, 1, 1, 1, 1, 0.0) == pytest.approx(1.0, abs=1e-15)
    assert cir_mgf(1, 1, 1, 0.7, 1e-12, 0.4) == pytest.approx(math.exp(0.28), rel=1e-10)
    with pytest.raises(ValueError):
        cir_mgf(1, 1, 1, 1, 1, 2.0 / (1 - math.exp(-1)))


def test_cir_mgf_against_monte_carlo():
    spec = CIRClamped(a=1.0, k=1.0, eta=1.0, x0=1.0, sigma_low=0.1, sigma_high=10.0)
    g = make_grid(400)
    V = simulate_vol(spec, g, _dW(g, 200_000, seed=11)).V[:, -1]
    est, se = exponential_moment(V, 0.5)
    target = float(cir_mgf(1, 1, 1, 1, 1, 0.5))
    # Euler bias at 400 steps is well below the MC error.
    assert abs(est - target) < 3 * se + 2e-3 * target


def test_rough_cir_deterministic_limit():
    spec = RoughCIRClamped(H=0.1, b0=0.3, b1=0.0, A1=0.0, V_bar=1.0, V0=0.2, sigma_low=0.1, sigma_high=5.0)
    g = make_grid(64)
    v = simulate_vol(spec, g, _dW(g, 2))
    a = 0.6
    np.testing.assert_allclose(v.V[0], 0.2 + 0.3 * g.nodes**a / gamma_fn(a + 1), rtol=1e-12)


def test_volterra_weights_constant_kernel_limit():
    g = make_grid(20)
    K1, K2 = volterra_weights(g, 0.5 - 1e-12)
    lower = np.tri(20, 20, 0, dtype=bool)
    np.testing.assert_allclose(K1[lower], np.broadcast_to(g.dt, (20, 20))[lower], rtol=1e-9)
    np.testing.assert_allclose(K2[lower], 1.0, rtol=1e-9)


def test_rough_paths_approach_classical_cir():
    g = make_grid(200)
    dW = _dW(g, 200, seed=5)
    cir = simulate_vol(CIRClamped(0.5, 1.0, 0.5, 0.5, 0.2, 1.0), g, dW).V
    errs = []
    for H in (0.3, 0.45, 0.499):
        rough = simulate_vol(RoughCIRClamped(H, 0.5, 1.0, 0.5 ** 2, 100.0, 0.5, 0.2, 1.0), g, dW).V
        errs.append(float(np.sqrt(np.mean((rough - cir) ** 2))))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.05


def test_log_diffusion_decomposition():
    spec = LogDiffusion(sigma0=1.5, b=0.2, psi=0.3)
    g = make_grid(50)
    v = simulate_vol(spec, g, _dW(g, 100))
    np.testing.assert_allclose(v.sigma, v.L * v.J, rtol=1e-13)
    np.testing.assert_allclose(v.J[0], 1.5 * np.exp(0.2 * g.nodes), rtol=1e-13)
    lo, hi, heuristic = clamp_bounds(spec)
    assert not heuristic and lo == pytest.approx(1.5 * math.exp(-0.2))


def test_driver_shape_checked():
    g = make_grid(10)
    with pytest.raises(ValueError):
        simulate_vol(Deterministic(), g, np.zeros((3, 9)))


def test_holder_trivial_paths():
    t = np.linspace(0, 1, 51)
    hs = holder_diagnostic(np.full(51, 2.0), 0.5, 1.0, 0.4, t)
    assert float(hs.F_M) == pytest.approx(1.0, abs=1e-13)
    assert float(hs.holder_norm) == 0.0
    hs = holder_diagnostic(t, 0.5, 1.0, 0.4, t)
    assert float(hs.holder_norm) == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(ValueError):
        holder_diagnostic(t, 0.3, 1.0, 0.4, t)


def test_holder_norm_stable_under_refinement():
    spec = CIRClamped(0.5, 1.0, 0.5, 0.5, 0.2, 1.0)
    q = []
    for n in (128, 256):
        g = make_grid(n)
        v = simulate_vol(spec, g, _dW(g, 300, seed=2))
        q.append(np.percentile(holder_diagnostic(v.V, 0.5, 1.0, 0.25, g).holder_norm, 95))
    assert np.all(np.isfinite(q))
    assert abs(q[1] / q[0] - 1.0) < 0.25
