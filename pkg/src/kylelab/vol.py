"""Noise-trading volatility models, path simulation and path-regularity diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import gamma as gamma_fn

from kylelab import kernels
from kylelab.core import PathSet, TimeGrid


def _positive(name, x):
    if not (x > 0 and math.isfinite(x)):
        raise ValueError(f"{name} must be positive and finite, got {x}")


@dataclass(frozen=True)
class Deterministic:
    """Piecewise-constant volatility: ``levels[k]`` on ``[breaks[k-1], breaks[k])``.

    A single level with no breaks is constant volatility.
    """

    levels: tuple = (1.0,)
    breaks: tuple = ()

    def __post_init__(self):
        lv = tuple(float(x) for x in np.atleast_1d(self.levels))
        br = tuple(float(x) for x in self.breaks)
        if len(lv) != len(br) + 1:
            raise ValueError("need exactly one more level than break points")
        for x in lv:
            _positive("volatility level", x)
        if any(b2 <= b1 for b1, b2 in zip(br, br[1:])):
            raise ValueError("break points must be strictly increasing")
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "breaks", br)

    def sigma_at(self, t):
        return np.asarray(self.levels)[np.searchsorted(self.breaks, np.asarray(t, dtype=float), side="right")]

    def integrated_variance(self, t, T):
        """``int_t^T sigma^2 ds`` in closed form."""
        t = np.asarray(t, dtype=float)
        knots = np.array((0.0,) + self.breaks)
        lv2 = np.asarray(self.levels) ** 2

        def cum(x):
            # int_0^x sigma^2
            seg_end = np.append(knots[1:], np.inf)
            lens = np.clip(np.minimum(x[..., None], seg_end) - knots, 0.0, None)
            return lens @ lv2

        return cum(np.full(t.shape, float(T))) - cum(t)


@dataclass(frozen=True)
class LogDiffusion:
    """``d sigma = sigma (b dt + psi dW)``; ``b`` and ``psi`` are constants or ``f(t, sigma)``."""

    sigma0: float = 1.0
    b: Union[float, Callable] = 0.0
    psi: Union[float, Callable] = 0.0

    def __post_init__(self):
        _positive("sigma0", self.sigma0)

    def coefficients(self, t, sigma):
        b = self.b(t, sigma) if callable(self.b) else np.full(np.shape(sigma), float(self.b))
        p = self.psi(t, sigma) if callable(self.psi) else np.full(np.shape(sigma), float(self.psi))
        return b, p

    @property
    def constant_coefficients(self) -> bool:
        return not (callable(self.b) or callable(self.psi))


@dataclass(frozen=True)
class CIRClamped:
    """``dV = (a - kV)dt + eta sqrt(V) dW`` with ``sigma = sigma_low + min(sqrt(V), sigma_high)``."""

    a: float
    k: float
    eta: float
    x0: float
    sigma_low: float
    sigma_high: float

    def __post_init__(self):
        for name in ("a", "k", "eta", "x0", "sigma_low", "sigma_high"):
            _positive(name, getattr(self, name))
        if self.sigma_high <= self.sigma_low:
            raise ValueError("sigma_high must exceed sigma_low")
        if 2 * self.a < self.eta**2:
            raise ValueError(f"Feller condition 2a >= eta^2 fails: 2a={2 * self.a}, eta^2={self.eta**2}")


@dataclass(frozen=True)
class RoughCIRClamped:
    """Truncated Volterra square-root factor with fractional kernel ``t^(H-1/2) / Gamma(H+1/2)``.

    ``V_t = V0 + int K(t-s)(b0 - b1 V_s) ds + int K(t-s) sqrt(A1 min(V_s+, V_bar)) dW_s``.
    """

    H: float
    b0: float
    b1: float
    A1: float
    V_bar: float
    V0: float
    sigma_low: float
    sigma_high: float

    def __post_init__(self):
        if not (0.0 < self.H < 0.5):
            raise ValueError(f"Hurst index must lie in (0, 1/2), got {self.H}")
        for name in ("b0", "b1", "A1", "V0"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be nonnegative, got {v}")
        for name in ("V_bar", "sigma_low", "sigma_high"):
            _positive(name, getattr(self, name))
        if self.sigma_high <= self.sigma_low:
            raise ValueError("sigma_high must exceed sigma_low")

    @property
    def alpha(self) -> float:
        return self.H + 0.5


VolModelSpec = Union[Deterministic, LogDiffusion, CIRClamped, RoughCIRClamped]


@dataclass(frozen=True, eq=False)
class VolPath:
    """Simulated volatility on a grid, with the decomposition ``sigma = L J``.

    ``sigma``, ``J``, ``L``, ``psi`` and ``V`` (when present) have shape
    ``(n_paths, n + 1)``; ``dW`` has shape ``(n_paths, n)``.
    """

    grid: TimeGrid
    sigma: np.ndarray
    dW: np.ndarray
    J: np.ndarray
    L: np.ndarray
    psi: np.ndarray
    V: Optional[np.ndarray] = None
    spec: object = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.sigma.shape[0]

    @property
    def state(self) -> np.ndarray:
        """Markov-type regressor: ``sqrt(V+)`` for factor models, else ``sigma``."""
        if self.V is not None:
            return np.sqrt(np.maximum(self.V, 0.0))
        return self.sigma


def clamp_sigma(V, sigma_low, sigma_high):
    return sigma_low + np.minimum(np.sqrt(np.maximum(V, 0.0)), sigma_high)


def volterra_weights(grid: TimeGrid, H: float):
    """Exact kernel integrals for the Volterra convolution.

    Drift weight of step ``j`` at node ``i``: ``int_{t_j}^{t_{j+1}} K(t_i - s) ds``.
    Noise weight: ``sqrt(int K^2 ds / dt_j)``, which matches the conditional
    variance of each stochastic-integral piece.
    """
    t = grid.nodes
    n = grid.n
    a = H + 0.5
    ti = t[1:, None]
    lo = np.clip(ti - t[None, :-1], 0.0, None)
    hi = np.clip(ti - t[None, 1:], 0.0, None)
    mask = np.tri(n, n, 0, dtype=bool)
    K1 = np.where(mask, (lo**a - hi**a) / gamma_fn(a + 1.0), 0.0)
    var = (lo ** (2 * H) - hi ** (2 * H)) / (2 * H * gamma_fn(a) ** 2)
    K2 = np.where(mask, np.sqrt(np.clip(var, 0.0, None) / grid.dt[None, :]), 0.0)
    return np.ascontiguousarray(K1), np.ascontiguousarray(K2)


def simulate_vol(spec: VolModelSpec, grid: TimeGrid, dW) -> VolPath:
    """Simulate volatility paths driven by the Brownian increments ``dW``.

    ``dW`` is an array ``(n_paths, n)`` or a :class:`PathSet` with a ``W``
    channel. CIR uses full-truncation Euler; the rough model uses the
    Volterra convolution with :func:`volterra_weights`.
    """
    if isinstance(dW, PathSet):
        dW = dW.increments("W")
    dW = np.ascontiguousarray(dW, dtype=float)
    if dW.ndim != 2 or dW.shape[1] != grid.n:
        raise ValueError(f"driver increments must have shape (P, {grid.n}), got {dW.shape}")
    P, n = dW.shape
    ones = np.ones((P, n + 1))
    zeros = np.zeros((P, n + 1))
    if isinstance(spec, Deterministic):
        sig = np.broadcast_to(spec.sigma_at(grid.nodes), (P, n + 1)).copy()
        return VolPath(grid, sig, dW, sig, ones, zeros, None, spec)
    if isinstance(spec, LogDiffusion):
        logs = np.empty((P, n + 1))
        logJ = np.empty((P, n + 1))
        psi = np.empty((P, n + 1))
        logs[:, 0] = logJ[:, 0] = math.log(spec.sigma0)
        dt = grid.dt
        for i in range(n):
            s = np.exp(logs[:, i])
            b, p = spec.coefficients(grid.nodes[i], s)
            psi[:, i] = p
            logs[:, i + 1] = logs[:, i] + (b - 0.5 * p * p) * dt[i] + p * dW[:, i]
            logJ[:, i + 1] = logJ[:, i] + b * dt[i]
        psi[:, n] = spec.coefficients(grid.nodes[n], np.exp(logs[:, n]))[1]
        sig = np.exp(logs)
        J = np.exp(logJ)
        return VolPath(grid, sig, dW, J, np.exp(logs - logJ), psi, None, spec)
    if isinstance(spec, CIRClamped):
        V = kernels.cir_euler(spec.x0, spec.a, spec.k, spec.eta, grid.dt, dW)
        sig = clamp_sigma(V, spec.sigma_low, spec.sigma_high)
        return VolPath(grid, sig, dW, sig, ones, zeros, V, spec)
    if isinstance(spec, RoughCIRClamped):
        K1, K2 = volterra_weights(grid, spec.H)
        V = kernels.volterra_cir(spec.V0, spec.b0, spec.b1, spec.A1, spec.V_bar, K1, K2, dW)
        sig = clamp_sigma(V, spec.sigma_low, spec.sigma_high)
        return VolPath(grid, sig, dW, sig, ones, zeros, V, spec)
    raise TypeError(f"unsupported volatility model {type(spec).__name__}")


def clamp_bounds(spec: VolModelSpec, T: float = 1.0):
    """Global bounds ``(J_minus, J_plus, heuristic)`` for the scale process ``J``.

    ``heuristic`` is True when the bounds are not guaranteed pathwise, which
    is the case for log-diffusions with state-dependent drift.
    """
    if isinstance(spec, Deterministic):
        return min(spec.levels), max(spec.levels), False
    if isinstance(spec, (CIRClamped, RoughCIRClamped)):
        return spec.sigma_low, spec.sigma_low + spec.sigma_high, False
    if isinstance(spec, LogDiffusion):
        if not callable(spec.b):
            g = abs(float(spec.b)) * T
            return spec.sigma0 * math.exp(-g), spec.sigma0 * math.exp(g), False
        return None, None, True
    raise TypeError(f"unsupported volatility model {type(spec).__name__}")


def cir_mgf(a, k, eta, x, t, u):
    """Closed-form ``E[exp(u V_t)]`` for the CIR factor started at ``x``.

    Valid for ``u < u0 = 2k / (eta^2 (1 - e^-k))``; for ``t > 1`` the pole
    ``2k / (eta^2 (1 - e^-kt))`` is also enforced.
    """
    u = np.asarray(u, dtype=float)
    t = np.asarray(t, dtype=float)
    u0 = 2 * k / (eta**2 * (-math.expm1(-k)))
    with np.errstate(divide="ignore"):
        pole = np.where(t > 0, 2 * k / (eta**2 * -np.expm1(-k * t)), np.inf)
    if np.any(u >= u0) or np.any(u >= pole):
        raise ValueError(f"mgf argument must satisfy u < {min(u0, float(np.min(pole)))}")
    F = 1.0 / (1.0 - eta**2 / (2 * k) * (-np.expm1(-k * t)) * u)
    return F ** (2 * a / eta**2) * np.exp(u * np.exp(-k * t) * F * x)


@dataclass(frozen=True)
class HolderStats:
    """Per-path ``F_M`` (double integral), its log, and the discrete Holder seminorm."""

    F_M: np.ndarray
    log_F_M: np.ndarray
    holder_norm: np.ndarray


def holder_diagnostic(path, gamma0: float, M: float, gamma: float, t=None) -> HolderStats:
    """Discrete Holder seminorm and the exponential double-integral functional.

    ``F_M = sum_{i,j} w_i w_j exp(M |X_i - X_j| / |t_i - t_j|^gamma0)`` with
    trapezoid weights, diagonal terms counting as ``exp(0)``.
    ``holder_norm = max_{i<j} |X_i - X_j| / |t_i - t_j|^gamma``.

    ``path`` is one path or a ``(P, n+1)`` array; ``t`` defaults to a uniform
    grid on ``[0, 1]``.
    """
    if not gamma < gamma0:
        raise ValueError("need gamma < gamma0")
    X = np.atleast_2d(np.asarray(path, dtype=float))
    if t is None:
        t = np.linspace(0.0, 1.0, X.shape[1])
    elif isinstance(t, TimeGrid):
        t = t.nodes
    t = np.asarray(t, dtype=float)
    dt = np.diff(t)
    w = np.zeros(t.size)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    logF, hn = kernels.holder_pairs(t, X, w, gamma0, M, gamma)
    with np.errstate(over="ignore"):
        F = np.exp(logF)
    if np.ndim(path) == 1:
        return HolderStats(F[0], logF[0], hn[0])
    return HolderStats(F, logF, hn)


def exponential_moment(values, r: float):
    """Sample mean and standard error of ``exp(r * values)``."""
    e = np.exp(r * np.asarray(values, dtype=float))
    return float(e.mean()), float(e.std(ddof=1) / math.sqrt(e.size))
