import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.special import ndtr

from kylelab.dist import Lognormal, LognormalMixture, Normal
from kylelab.options import (Call, Put, bs_price, count_local_minima, default_strikes, implied_total_variance,
                             iv_curve, median3, option_price)
from kylelab.rfield import rfield_for

MIX3 = LognormalMixture((1.0, 1.0, 1.0), (0.2, 0.5, 0.9), (0.3, 0.4, 0.3))
MIX2 = LognormalMixture((1.0, 1.2), (0.2, 0.6), (0.5, 0.5))


def test_bs_limits():
    assert bs_price(1.0, 0.8, 0.0) == 1.0 - 0.8
    assert bs_price(1.0, 1.2, 0.0) == 0.0
    assert bs_price(1.0, 1.2, 0.0, "put") == pytest.approx(0.2)
    assert bs_price(1.0, 1.0, 1.0) == pytest.approx(2 * ndtr(0.5) - 1, abs=1e-15)
    assert bs_price(1.0, 1.0, 1.0) == pytest.approx(0.38292, abs=1e-5)
    assert bs_price(2.0, 1.0, 1e4) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ValueError):
        bs_price(1.0, -1.0, 0.1)
    with pytest.raises(ValueError):
        bs_price(1.0, 1.0, 0.1, "straddle")


def test_put_call_parity():
    K = np.array([0.5, 1.0, 1.7])
    np.testing.assert_allclose(bs_price(1.2, K, 0.3) - bs_price(1.2, K, 0.3, "put"), 1.2 - K, atol=1e-14)


@pytest.mark.parametrize("w", [0.01, 0.25, 1.0])
@pytest.mark.parametrize("K", [0.7, 1.0, 1.4])
@pytest.mark.parametrize("kind", ["call", "put"])
def test_implied_variance_round_trip(w, K, kind):
    assert implied_total_variance(bs_price(1.0, K, w, kind), 1.0, K, kind) == pytest.approx(w, abs=1e-9)


def test_implied_variance_at_intrinsic_and_domain():
    assert implied_total_variance(1.0 - 0.8, 1.0, 0.8) == 0.0
    assert implied_total_variance(0.0, 1.0, 1.5) == 0.0
    with pytest.raises(ValueError):
        implied_total_variance(0.1, 1.0, 0.8)
    with pytest.raises(ValueError):
        implied_total_variance(1.0, 1.0, 0.8)
    with pytest.raises(ValueError):
        implied_total_variance(float("nan"), 1.0, 0.8)


@settings(max_examples=60, deadline=None)
@given(w=st.floats(1e-3, 4.0), k=st.floats(-0.8, 0.8))
def test_implied_variance_round_trip_property(w, k):
    # Out-of-the-money quotes, away from underflow of the time value.
    assume(abs(k) / math.sqrt(w) < 20.0)
    K = math.exp(k)
    kind = "put" if K < 1.0 else "call"
    price = float(bs_price(1.0, K, w, kind))
    assert implied_total_variance(price, 1.0, K, kind) == pytest.approx(w, rel=1e-7, abs=1e-9)


def test_identity_payoff_gives_spot():
    for law in (Normal(0.5, 2.0), Lognormal(1.0, 0.5), MIX3):
        spot = float(rfield_for(law).R_xi(0.4, 0.3))
        assert option_price(law, 0.3, 0.4, lambda p: p) == pytest.approx(spot, rel=1e-12)
        if not isinstance(law, Normal):
            assert option_price(law, 0.3, 0.4, Call(1e-12)) == pytest.approx(spot, rel=1e-9)


def test_zero_remaining_variance_is_payoff_at_state():
    law = Lognormal(1.0, 0.5)
    assert option_price(law, 0.2, 0.0, Call(0.8)) == pytest.approx(max(float(law.transport_map(0.2)) - 0.8, 0.0))
    with pytest.raises(ValueError):
        option_price(law, 0.0, 1.5, Call(1.0))


@pytest.mark.parametrize("xi,Sigma", [(0.0, 0.25), (0.5, 0.5), (-1.0, 1.0)])
def test_lognormal_call_matches_black_scholes(xi, Sigma):
    law = Lognormal(1.0, 0.5)
    spot = float(rfield_for(law).R_xi(Sigma, xi))
    for K in (0.5 * spot, spot, 2.0 * spot):
        ref = float(bs_price(spot, K, 0.25 * Sigma))
        assert option_price(law, xi, Sigma, Call(K)) == pytest.approx(ref, abs=1e-8)
        assert option_price(law, xi, Sigma, Put(K)) == pytest.approx(ref - spot + K, abs=1e-8)


def test_call_prices_convex_and_decreasing_in_strike():
    K = np.linspace(0.3, 3.0, 40)
    c = np.array([option_price(MIX3, 0.2, 0.5, Call(k)) for k in K])
    assert np.all(np.diff(c) < 0)
    assert np.all(np.diff(c, 2) > -1e-12)


def test_order_doubling_converges():
    for K in (0.5, 1.0, 2.0):
        a = option_price(MIX3, 0.0, 0.5, Call(K), order=64)
        b = option_price(MIX3, 0.0, 0.5, Call(K), order=128)
        assert abs(a - b) < 1e-8


def test_median_filter_and_minima():
    np.testing.assert_array_equal(median3([1.0, 5.0, 1.0, 1.0]), [1.0, 1.0, 1.0, 1.0])
    assert count_local_minima([3, 2, 1, 2, 3]) == 1
    assert count_local_minima([3, 1, 3, 3, 3, 4]) == 0  # the filter removes single-node spikes
    assert count_local_minima([6, 5, 4, 3, 4, 5, 6, 5, 4, 3, 4, 5, 6]) == 2
    assert count_local_minima(np.full(9, 2.0) + 1e-13 * np.sin(np.arange(9))) == 0
    assert count_local_minima([1, 2, 3]) == 0


def test_lognormal_iv_is_flat():
    law = Lognormal(1.0, 0.5)
    for xi, Sigma in ((0.0, 0.25), (0.3, 0.75), (-0.5, 1.0)):
        c = iv_curve(law, xi, Sigma)
        assert c.shape == "flat" and c.local_minima == 0 and not c.has_w
        np.testing.assert_allclose(c.total_variance, 0.25 * Sigma, rtol=1e-7)


def test_two_component_mixture_has_no_w():
    for Sigma in (0.25, 0.5, 0.75):
        assert not iv_curve(MIX2, 0.0, Sigma).has_w


def test_three_component_mixture_can_produce_w():
    law = LognormalMixture((1.0, 0.5, 1.5), (0.1, 0.2, 0.6), (0.3, 0.4, 0.3))
    assert any(iv_curve(law, 0.0, S).has_w for S in (0.25, 0.5, 0.75))


def test_iv_curve_input_checks():
    with pytest.raises(ValueError):
        iv_curve(MIX3, 0.0, 0.0)
    with pytest.raises(ValueError):
        iv_curve(MIX3, 0.0, 0.5, [])
    with pytest.raises(ValueError):
        iv_curve(MIX3, 0.0, 0.5, [1.0, 0.9])
    with pytest.raises(ValueError):
        default_strikes(Normal(), 0.0, 0.5)


def test_default_strikes_log_spaced_around_spot():
    K = default_strikes(MIX3, 0.0, 0.5, n=21)
    spot = float(rfield_for(MIX3).R_xi(0.5, 0.0))
    assert K[10] == pytest.approx(spot, rel=1e-12)
    np.testing.assert_allclose(np.diff(np.log(K)), np.log(K[1] / K[0]), rtol=1e-10)
