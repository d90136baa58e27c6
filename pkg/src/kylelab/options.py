"""Option prices under the conditional law of the value and implied total variance curves."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from kylelab.dist import DistributionSpec, Lognormal, LognormalMixture, Normal
from kylelab.rfield import RField, gauss_hermite, gaussian_panels, rfield_for


def bs_price(S, K, w, kind: str = "call"):
    """Zero-rate Black-Scholes price parameterized by total variance ``w``."""
    S, K, w = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (S, K, w)))
    if np.any(S <= 0) or np.any(K <= 0) or np.any(w < 0):
        raise ValueError("bs_price needs S > 0, K > 0 and w >= 0")
    sw = np.sqrt(w)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(S / K) + 0.5 * w) / sw
        d2 = d1 - sw
    if kind == "call":
        out = S * ndtr(d1) - K * ndtr(d2)
        intrinsic = np.maximum(S - K, 0.0)
    elif kind == "put":
        out = K * ndtr(-d2) - S * ndtr(-d1)
        intrinsic = np.maximum(K - S, 0.0)
    else:
        raise ValueError(f"unknown option kind {kind!r}")
    out = np.where(w == 0, intrinsic, out)
    return out[()] if out.ndim == 0 else out


def _bs_vega_w(S, K, w):
    sw = np.sqrt(w)
    d1 = (np.log(S / K) + 0.5 * w) / sw
    return S * np.exp(-0.5 * d1 * d1) / math.sqrt(2 * math.pi) / (2 * sw)


def implied_total_variance(price, S, K, kind: str = "call", bracket_tol: float = 1e-12, newton_steps: int = 8):
    """Total variance ``w`` with ``bs_price(S, K, w, kind) == price``.

    Bisection narrows the bracket to ``bracket_tol`` and Newton steps that
    stay inside the bracket polish the root. Calls with ``K < S`` and puts
    with ``K > S`` are converted by parity and the out-of-the-money option
    is inverted, which keeps deep in-the-money quotes well conditioned.
    """
    price, S, K = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (price, S, K)))
    price, S, K = price.astype(float).copy(), S.astype(float), K.astype(float)
    if kind == "call":
        lower, upper = np.maximum(S - K, 0.0), S
        otm_put = K < S
        target = np.where(otm_put, price - (S - K), price)
    elif kind == "put":
        lower, upper = np.maximum(K - S, 0.0), K
        otm_put = K <= S
        target = np.where(otm_put, price, price - (K - S))
    else:
        raise ValueError(f"unknown option kind {kind!r}")
    if np.any(price < lower) or np.any(price >= upper) or not np.all(np.isfinite(price)):
        raise ValueError("option price outside the no-arbitrage range [(S-K)+, S)")
    at_floor = price == lower
    target = np.maximum(target, 0.0)

    def otm(w):
        return np.where(otm_put, bs_price(S, K, w, "put"), bs_price(S, K, w, "call"))

    lo = np.zeros_like(target)
    hi = np.ones_like(target)
    for _ in range(200):
        low_side = otm(hi) < target
        if not low_side.any():
            break
        hi = np.where(low_side, 2 * hi, hi)
    while np.any(hi - lo > bracket_tol * np.maximum(1.0, hi)):
        mid = 0.5 * (lo + hi)
        below = otm(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    w = 0.5 * (lo + hi)
    for _ in range(newton_steps):
        safe = w > 0
        vega = np.where(safe, _bs_vega_w(S, K, np.where(safe, w, 1.0)), 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(vega > 0, (otm(w) - target) / vega, 0.0)
        cand = w - step
        ok = (cand >= lo) & (cand <= hi) & np.isfinite(cand)
        w = np.where(ok, cand, w)
    w = np.where(at_floor, 0.0, w)
    return w[()] if w.ndim == 0 else w


@dataclass(frozen=True)
class Call:
    K: float

    def __call__(self, p):
        return np.maximum(np.asarray(p) - self.K, 0.0)


@dataclass(frozen=True)
class Put:
    K: float

    def __call__(self, p):
        return np.maximum(self.K - np.asarray(p), 0.0)


_GL16_X, _GL16_W = np.polynomial.legendre.leggauss(16)


def _panel_rule(a, b, width):
    """Composite 16-point Gauss-Legendre nodes and weights on ``[a, b]``."""
    m = max(1, int(math.ceil((b - a) / width)))
    edges = np.linspace(a, b, m + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    x = (mid[:, None] + half[:, None] * _GL16_X[None, :]).ravel()
    w = (half[:, None] * _GL16_W[None, :]).ravel()
    return x, w


def _vanilla(rf: RField, xi: float, Sigma: float, K: float, kind: str, width: float, reach: float):
    """Call or put price with the kink of the payoff on a panel edge."""
    s = math.sqrt(Sigma)
    y_star = (float(rf.spec.inverse_transport(K)) - xi) / s
    if kind == "call":
        a, b = y_star, max(y_star, 0.0) + reach
        if b <= a:
            return 0.0
        y, wq = _panel_rule(a, b, width)
        f = rf.h(xi + s * y) - K
    else:
        a, b = min(y_star, 0.0) - reach, y_star
        if b <= a:
            return 0.0
        y, wq = _panel_rule(a, b, width)
        f = K - rf.h(xi + s * y)
    phi = np.exp(-0.5 * y * y) / math.sqrt(2 * math.pi)
    return float(np.sum(wq * phi * np.maximum(f, 0.0)))


def option_price(dist: DistributionSpec, xi: float, Sigma: float, payoff, order: int = 64):
    """``E[H(h(xi + sqrt(Sigma) Y))]`` for ``Y ~ N(0, 1)``.

    ``Call`` and ``Put`` payoffs are integrated with composite Gauss-Legendre
    panels that start at the kink, so the integrand is smooth on every panel;
    ``order`` sets the number of panels per unit of ``y`` as ``order / 64 * 4``.
    Other callables use Gauss-Hermite with ``2 * order`` nodes.
    ``Sigma = 0`` returns ``H(h(xi))``.
    """
    Sigma = float(Sigma)
    if not (0.0 <= Sigma <= 1.0):
        raise ValueError(f"remaining variance must lie in [0, 1], got {Sigma}")
    rf = rfield_for(dist, max(64, order)) if not isinstance(dist, RField) else dist
    if Sigma == 0.0:
        return float(np.asarray(payoff(rf.h(np.asarray(xi, dtype=float)))))
    if isinstance(payoff, (Call, Put)):
        width = 0.25 * 64.0 / order
        reach = 10.0 + max(_sigmas(rf.spec)) * math.sqrt(Sigma)
        return _vanilla(rf, float(xi), Sigma, payoff.K, "call" if isinstance(payoff, Call) else "put",
                        width, reach)
    if isinstance(rf.spec, LognormalMixture):
        y, wq = gaussian_panels(2 * order, -9.5, 9.5 + max(rf.spec.sigma) * math.sqrt(Sigma))
    else:
        y, wq = gauss_hermite(2 * order)
    return float(np.sum(wq * payoff(rf.h(xi + math.sqrt(Sigma) * y))))


def _sigmas(spec):
    if isinstance(spec, LognormalMixture):
        return spec.sigma
    if isinstance(spec, Lognormal):
        return (spec.sigma,)
    if isinstance(spec, Normal):
        return (0.0,)
    raise TypeError(f"unsupported law {spec!r}")


@dataclass
class IVCurve:
    strikes: np.ndarray
    spot: float
    call_prices: np.ndarray
    total_variance: np.ndarray
    xi: float
    Sigma: float
    local_minima: int
    shape: str
    flat_deviation: float
    meta: dict = field(default_factory=dict)

    @property
    def has_w(self) -> bool:
        return self.local_minima >= 2


def median3(x):
    """Three-point median filter; endpoints are kept."""
    x = np.asarray(x, dtype=float)
    out = x.copy()
    if x.size >= 3:
        out[1:-1] = np.median(np.stack([x[:-2], x[1:-1], x[2:]]), axis=0)
    return out


def count_local_minima(w, rel_tol: float = 1e-9):
    """Interior local minima (valleys) of the median-filtered curve.

    The filter turns a sharp minimum into a two-point plateau, so a valley
    is a change from falling to rising in the sequence of differences;
    differences below ``rel_tol`` times the curve scale count as level and
    are skipped, which ignores quadrature ripple on a flat curve.
    """
    m = median3(w)
    if m.size < 3:
        return 0
    tol = rel_tol * float(np.max(np.abs(m)))
    d = np.diff(m)
    signs = np.sign(d[np.abs(d) > tol])
    return int(np.sum((signs[:-1] < 0) & (signs[1:] > 0)))


def default_strikes(dist: DistributionSpec, xi: float, Sigma: float, n: int = 41, width: float = 3.0):
    """``n`` log-spaced strikes over ``spot * exp(+-width * sd)``, ``sd`` the conditional log-value std."""
    if not isinstance(dist, (Lognormal, LognormalMixture)):
        raise ValueError("log-spaced default strikes need a positive value law")
    rf = rfield_for(dist, 64)
    y, wq = gauss_hermite(128)
    logs = np.log(rf.h(xi + math.sqrt(Sigma) * y))
    mean = float(np.sum(wq * logs))
    sd = math.sqrt(max(float(np.sum(wq * (logs - mean) ** 2)), 0.0))
    spot = float(rf.R_xi(Sigma, xi))
    return spot * np.exp(np.linspace(-width * sd, width * sd, n))


def iv_curve(dist: DistributionSpec, xi: float, Sigma: float, strikes=None, order: int = 64,
             flat_tol: float = 0.005) -> IVCurve:
    """Implied total variance across strikes for the conditional law ``h(N(xi, Sigma))``.

    Out-of-the-money options are priced and inverted; the call prices in the
    result follow by parity. ``shape`` is ``"flat"`` when the relative
    spread is below ``flat_tol``, ``"W"`` with two or more local minima,
    ``"smile"`` with one and ``"monotone"`` otherwise.
    """
    if not (0.0 < Sigma <= 1.0):
        raise ValueError(f"iv_curve needs Sigma in (0, 1], got {Sigma}")
    if strikes is None:
        strikes = default_strikes(dist, xi, Sigma)
    K = np.asarray(strikes, dtype=float)
    if K.ndim != 1 or K.size == 0:
        raise ValueError("strike list must be a non-empty 1-d sequence")
    if np.any(K <= 0) or np.any(np.diff(K) <= 0):
        raise ValueError("strikes must be positive and strictly increasing")
    rf = rfield_for(dist, max(64, order))
    spot = float(rf.R_xi(Sigma, xi))
    if spot <= 0:
        raise ValueError("implied variance needs a positive spot")
    otm = np.empty(K.size)
    put = K < spot
    for j, k in enumerate(K):
        otm[j] = option_price(dist, xi, Sigma, Put(k) if put[j] else Call(k), order)
    calls = np.where(put, otm + spot - K, otm)
    w = np.empty(K.size)
    for j in range(K.size):
        w[j] = implied_total_variance(otm[j], spot, K[j], "put" if put[j] else "call")
    mins = count_local_minima(w)
    dev = float((w.max() - w.min()) / max(abs(w.mean()), 1e-300))
    if dev < flat_tol:
        shape = "flat"
    elif mins >= 2:
        shape = "W"
    elif mins == 1:
        shape = "smile"
    else:
        shape = "monotone"
    return IVCurve(K, spot, calls, w, float(xi), float(Sigma), mins, shape, dev, {"order": order})
