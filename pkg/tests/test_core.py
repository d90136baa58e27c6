import numpy as np
import pytest

from kylelab.core import (CH_B, CH_W, MarketParams, PathSet, TimeGrid, brownian_increments, correlated_brownian,
                          make_grid, noise_increments, standard_normals)


def test_market_params_rho_hat():
    p = MarketParams(2.0, -0.6)
    assert p.rho_hat == pytest.approx(0.8, abs=1e-15)
    assert p.rho**2 + p.rho_hat**2 == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("kw", [{"rho": 1.0}, {"rho": -1.2}, {"T": 0.0}, {"T": float("inf")}])
def test_market_params_rejects(kw):
    with pytest.raises(ValueError):
        MarketParams(**kw)


def test_uniform_grids():
    np.testing.assert_array_equal(make_grid(4, 1.0).nodes, [0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_array_equal(make_grid(2, 2.0).nodes, [0.0, 1.0, 2.0])


def test_geometric_grid_refines_towards_T():
    g = make_grid(100, 1.0, "geometric", 0.9)
    assert g.dt[-1] < g.dt[0]
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 1.0 and g.n == 100
    assert np.all(np.diff(g.dt) <= 1e-9 * g.dt[:-1])
    g = make_grid(1000, 1.0, "geometric", 0.5)
    assert g.dt[-1] / g.dt[0] == pytest.approx(2.0**-8, rel=1e-9)
    assert g.tau[-1] == 0.0


@pytest.mark.parametrize("q", [0.3, 0.5, 0.75, 0.9])
@pytest.mark.parametrize("n", [2, 3, 7, 36, 100, 1000])
def test_geometric_steps_never_grow(n, q):
    g = make_grid(n, 1.0, "geometric", q)
    assert g.n == n
    assert np.all(np.diff(g.dt) <= 1e-9 * g.dt[:-1])


@pytest.mark.parametrize("args", [(1,), (10, 0.0), (10, 1.0, "geometric", 1.0), (10, 1.0, "bogus")])
def test_make_grid_rejects(args):
    with pytest.raises(ValueError):
        make_grid(*args)


def test_time_grid_invariants():
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.1, 1.0]))
    g = make_grid(8)
    assert g.trapezoid_weights().sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        g.nodes[0] = 1.0


def test_brownian_statistics():
    g = make_grid(10, 1.0)
    ps = correlated_brownian(g, MarketParams(), 10_000, seed=3)
    dW, dB = ps.increments("W").ravel(), ps.increments("B").ravel()
    assert abs(np.corrcoef(dW, dB)[0, 1]) < 3 / np.sqrt(dW.size)
    wt = ps["W"][:, -1]
    se = np.sqrt(2.0 / (wt.size - 1))
    assert abs(wt.var(ddof=1) - 1.0) < 3 * se
    assert ps.seed == 3 and ps.labels == ("W", "B") and ps.n_paths == 10_000


def test_streams_are_pure_functions_of_path_index():
    a = standard_normals(9, CH_W, np.arange(50), 20)
    b = standard_normals(9, CH_W, np.arange(20, 40), 20, threads=3)
    np.testing.assert_array_equal(a[20:40], b)
    c = standard_normals(9, CH_B, np.arange(50), 20)
    assert not np.array_equal(a, c)
    g = make_grid(20)
    np.testing.assert_array_equal(brownian_increments(g, 9, CH_W, range(5)),
                                  brownian_increments(g, 9, CH_W, range(5), threads=4))


def test_pathset_validation():
    g = make_grid(4)
    with pytest.raises(ValueError):
        PathSet(g, {"W": np.zeros((2, 4))})
    with pytest.raises(ValueError):
        PathSet(g, {"W": np.zeros((2, 5)), "B": np.zeros((3, 5))})


def test_noise_increments_mix_drivers():
    sigma = np.full((1, 3), 2.0)
    dW, dB = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    out = noise_increments(sigma, dW, dB, MarketParams(1.0, 0.6))
    np.testing.assert_allclose(out, [[1.2, 1.6]])
