import math

import numpy as np
import pytest

from kylelab.core import MarketParams
from kylelab.dist import Lognormal, Normal
from kylelab.equil import (DEFAULT_DEVIATIONS, DelayedStart, Scaled, Scenario, WrongTarget, deviation_profit,
                           insider_strategy, mc_report, price_and_lambda, profit_bound, simulate_equilibrium,
                           simulate_state)
from kylelab.filter import build_solver
from kylelab.rfield import rfield_for
from kylelab.vol import CIRClamped, Deterministic


def _run(dist, vol=Deterministic(), n=200, paths=2000, seed=1, rho=0.0, method="bridge", frozen_w=False,
         refinement="geometric"):
    scn = Scenario.build(MarketParams(1.0, rho), dist, vol, n=n, refinement=refinement)
    solver = build_solver(scn.vol, scn.market, scn.grid)
    rf = rfield_for(dist)
    return scn, rf, simulate_equilibrium(scn, solver, rf, np.arange(paths), seed, method, frozen_w)


def test_bridge_pins_terminal_state_and_price():
    _, _, b = _run(Lognormal(1.0, 0.5), vol=CIRClamped(0.5, 1.0, 1.0, 0.25, 0.2, 1.0), paths=500, rho=0.3)
    assert b.terminal_xi_error == 0.0
    assert b.terminal_price_error < 1e-12
    assert b.step_identity_error < 1e-12
    assert np.all(b.Lambda[:, :-1] > 0)


def test_normal_price_is_affine_in_state():
    _, _, b = _run(Normal(2.0, 3.0), paths=200)
    np.testing.assert_allclose(b.P, 3.0 * b.xi + 2.0, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(b.Lambda, 3.0 * b.filtration.lam, rtol=1e-9)


def test_lognormal_price_closed_form():
    _, _, b = _run(Lognormal(1.3, 0.4), paths=200)
    S = b.filtration.Sigma
    np.testing.assert_allclose(b.P, 1.3 * np.exp(0.4 * b.xi - 0.08 * (1.0 - S)), rtol=1e-8)


def test_state_requires_decreasing_sigma():
    _, _, b = _run(Normal(), paths=3, n=20)
    f = b.filtration
    bad = type(f)(f.grid, f.G, f.U, np.ones_like(f.Sigma), f.lam, f.method)
    with pytest.raises(ValueError):
        simulate_state(bad, b.z, np.zeros((3, 20)))
    with pytest.raises(ValueError):
        simulate_state(f, b.z, np.zeros((3, 20)), method="milstein")


def test_frozen_target_gives_no_trading():
    scn, _, b = _run(Normal(), paths=4, n=50)
    xi = np.broadcast_to(b.z[:, None], b.xi.shape).copy()
    for method in ("bridge", "euler"):
        X, _, _ = insider_strategy(xi, b.filtration, b.z, b.sigma, b.dW, np.zeros_like(b.noise), scn.market, method)
        assert np.max(np.abs(X)) == 0.0


def test_euler_converges_to_bridge():
    errs = []
    for n in (100, 400, 1600):
        scn, _, b = _run(Normal(), n=n, paths=500, seed=2, refinement="uniform")
        _, _, e = _run(Normal(), n=n, paths=500, seed=2, method="euler", refinement="uniform")
        keep = scn.grid.nodes <= 0.9
        errs.append(float(np.sqrt(np.mean((b.xi[:, keep] - e.xi[:, keep]) ** 2))))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:])) / 2
    assert np.all(orders > 0.8), (errs, orders)


def test_conditional_variance_with_frozen_w():
    _, _, b = _run(Normal(), vol=CIRClamped(0.5, 1.0, 1.0, 0.25, 0.2, 1.0), paths=10_000, seed=3, frozen_w=True)
    i = b.grid.index_of(0.5)
    S = b.filtration.Sigma[0, i]
    d = b.xi[:, -1] - b.xi[:, i]
    se = S * math.sqrt(2.0 / (d.size - 1))
    assert abs(d.var(ddof=1) - S) < 3 * se


def test_normal_unit_profit():
    scn, rf, b = _run(Normal(), paths=20_000, seed=4)
    se = b.Pi_T.std(ddof=1) / math.sqrt(b.Pi_T.size)
    assert abs(b.Pi_T.mean() - 1.0) < 3 * se
    lam0 = float(b.filtration.lam[0, 0])
    np.testing.assert_allclose(profit_bound(rf, b.v, lam0), (1.0 + b.v**2) / 2, rtol=1e-12)


def test_profit_computations_agree_at_fine_grid():
    _, _, b = _run(Lognormal(1.0, 0.5), n=2000, paths=500, seed=5)
    rms = np.sqrt(np.mean((b.Pi_T - b.Pi_T_time) ** 2)) / np.sqrt(np.mean(b.Pi_T**2))
    assert rms < 0.01


def test_deviation_identities():
    _, rf, b = _run(Lognormal(1.0, 0.5), paths=300, seed=6)
    np.testing.assert_array_equal(deviation_profit(Scaled(0.0), b, rf), 0.0)
    np.testing.assert_allclose(deviation_profit(Scaled(1.0), b, rf), b.Pi_T, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(deviation_profit(WrongTarget(0.0), b, rf), b.Pi_T, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(deviation_profit(DelayedStart(0.0), b, rf), b.Pi_T, rtol=1e-9, atol=1e-9)
    with pytest.raises(TypeError):
        deviation_profit(object(), b, rf)
    assert [d.name for d in DEFAULT_DEVIATIONS] == ["scaled_0", "scaled_0.5", "scaled_2", "wrong_target_1"]


def test_deviations_against_bound():
    _, rf, b = _run(Normal(), paths=5000, seed=7)
    bound = profit_bound(rf, b.v, float(b.filtration.lam[0, 0]))
    for d in (Scaled(0.5), Scaled(2.0), WrongTarget(1.0)):
        gap = bound - deviation_profit(d, b, rf)
        assert gap.mean() > 3 * gap.std(ddof=1) / math.sqrt(gap.size), d.name
    # A delayed start still pins the state at z, so it attains the bound.
    gap = bound - deviation_profit(DelayedStart(0.5), b, rf)
    assert abs(gap.mean()) < 3 * gap.std(ddof=1) / math.sqrt(gap.size)


def test_mc_report_deterministic_normal_all_pass():
    scn = Scenario.build(MarketParams(), Normal(), Deterministic(), n=100)
    rep = mc_report(scn, 4000, seed=8)
    assert rep.passed, [c.name for c in rep.failed()]
    assert rep.n_paths == 4000 and rep.seed == 8
    for c in rep.select("submartingale_Lambda"):
        assert abs(c.estimate) < 1e-12
    d = rep.to_dict()
    assert d["passed"] is True and len(d["checks"]) == len(rep.checks)
    with pytest.raises(KeyError):
        rep.get("no_such_check")


def test_mc_report_thread_and_batch_invariance():
    scn = Scenario.build(MarketParams(), Normal(), Deterministic(), n=50)
    a = mc_report(scn, 600, seed=9, batch_size=600, conditional=False)
    b = mc_report(scn, 600, seed=9, batch_size=100, threads=3, conditional=False)
    for x, y in zip(a.checks, b.checks):
        assert x.name == y.name
        assert x.estimate == pytest.approx(y.estimate, rel=1e-12, abs=1e-15)


def test_drift_statistics_are_calibrated():
    scn = Scenario.build(MarketParams(), Normal(), Deterministic(), n=50, refinement="uniform")
    z = np.array([[c.estimate / c.se for c in mc_report(scn, 200, seed, conditional=False).select("martingale_xi")]
                  for seed in range(60)]).ravel()
    # 240 standardized drifts: mean 0 and unit spread within sampling error.
    assert abs(z.mean()) < 3 / math.sqrt(z.size)
    assert 0.8 < z.std() < 1.2
