"""Fundamental-value laws and their Gaussian transport maps ``h = F^-1 o Phi``."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr, ndtri_exp

from kylelab import kernels
from kylelab.core import CH_VALUE, standard_normals

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


def _check_positive(name, value):
    if not (value > 0 and math.isfinite(value)):
        raise ValueError(f"{name} must be positive and finite, got {value}")


def _gl_integral(f, a, b, width=0.25):
    """Composite Gauss-Legendre integral of vectorised ``f`` from ``a`` to ``b`` (elementwise)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    out = np.zeros(a.shape)
    span = b - a
    panels = np.maximum(1, np.ceil(np.abs(span) / width)).astype(int)
    for m in np.unique(panels):
        sel = panels == m
        lo, d = a[sel], span[sel] / m
        # nodes for every panel of every selected point
        k = np.arange(m)[None, :, None]
        x = lo[:, None, None] + d[:, None, None] * (k + 0.5 * (_GL_X[None, None, :] + 1.0))
        vals = f(x.ravel()).reshape(x.shape)
        out[sel] = 0.5 * d * np.einsum("pkq,q->p", vals, _GL_W)
    return out


@dataclass(frozen=True)
class Normal:
    """Gaussian value ``N(mean, std^2)``; the transport map is affine."""

    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        _check_positive("std", self.std)

    kind = kernels.KIND_NORMAL

    def kernel_params(self):
        return self.kind, float(self.mean), float(self.std)

    def cdf(self, v):
        return ndtr((np.asarray(v, dtype=float) - self.mean) / self.std)

    def pdf(self, v):
        z = (np.asarray(v, dtype=float) - self.mean) / self.std
        return np.exp(-0.5 * z * z - _LOG_SQRT_2PI) / self.std

    def transport_map(self, x):
        return self.mean + self.std * np.asarray(x, dtype=float)

    def h_prime(self, x):
        return np.full(np.shape(x), self.std)

    def h_second(self, x):
        return np.zeros(np.shape(x))

    def inverse_transport(self, v):
        return (np.asarray(v, dtype=float) - self.mean) / self.std

    def antiderivative(self, x):
        """``A(x) = int_0^x h``."""
        x = np.asarray(x, dtype=float)
        return 0.5 * self.std * x * x + self.mean * x

    @property
    def expected_value(self) -> float:
        return self.mean


@dataclass(frozen=True)
class Lognormal:
    """Lognormal value with mean ``m`` and log-volatility ``sigma``."""

    m: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        _check_positive("m", self.m)
        _check_positive("sigma", self.sigma)

    kind = kernels.KIND_LOGNORMAL

    @property
    def _scale(self) -> float:
        return self.m * math.exp(-0.5 * self.sigma**2)

    def kernel_params(self):
        return self.kind, self._scale, float(self.sigma)

    def _z(self, v):
        v = np.asarray(v, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(v > 0, (np.log(np.where(v > 0, v, 1.0)) - math.log(self._scale)) / self.sigma, -np.inf)

    def cdf(self, v):
        return ndtr(self._z(v))

    def pdf(self, v):
        v = np.asarray(v, dtype=float)
        z = self._z(v)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(v > 0, np.exp(-0.5 * z * z - _LOG_SQRT_2PI) / (self.sigma * np.where(v > 0, v, 1.0)), 0.0)

    def transport_map(self, x):
        return self._scale * np.exp(self.sigma * np.asarray(x, dtype=float))

    def h_prime(self, x):
        return self.sigma * self.transport_map(x)

    def h_second(self, x):
        return self.sigma**2 * self.transport_map(x)

    def inverse_transport(self, v):
        v = np.asarray(v, dtype=float)
        if np.any(v <= 0):
            raise ValueError("lognormal inverse transport needs v > 0")
        return self._z(v)

    def antiderivative(self, x):
        x = np.asarray(x, dtype=float)
        return self._scale / self.sigma * np.expm1(self.sigma * x)

    @property
    def expected_value(self) -> float:
        return self.m


@dataclass(frozen=True)
class LognormalMixture:
    """Finite mixture of lognormals with means ``m_i``, log-vols ``sigma_i`` and weights ``w_i``.

    In log space the law is a Gaussian mixture with centres
    ``mu_i = ln m_i - sigma_i^2 / 2``; the transport map is solved there.
    """

    m: tuple
    sigma: tuple
    weights: tuple

    def __post_init__(self):
        m = tuple(float(x) for x in self.m)
        s = tuple(float(x) for x in self.sigma)
        w = tuple(float(x) for x in self.weights)
        if not (len(m) == len(s) == len(w)) or len(m) == 0:
            raise ValueError("mixture needs equally many means, vols and weights (at least one)")
        for x in m:
            _check_positive("component mean", x)
        for x in s:
            _check_positive("component sigma", x)
        for x in w:
            if not (x > 0):
                raise ValueError(f"mixture weights must be positive, got {x}")
        total = math.fsum(w)
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"mixture weights must sum to 1, got {total}")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "sigma", s)
        object.__setattr__(self, "weights", tuple(x / total for x in w))

    kind = kernels.KIND_MIXTURE

    @property
    def mu_log(self) -> np.ndarray:
        s = np.asarray(self.sigma)
        return np.log(np.asarray(self.m)) - 0.5 * s * s

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(np.asarray(self.weights))

    def kernel_params(self):
        return self.kind, 0.0, 0.0

    def _log_z(self, v):
        v = np.asarray(v, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.log(np.where(v > 0, v, 0.0))
        return (y[..., None] - self.mu_log) / np.asarray(self.sigma)

    def log_cdf(self, v):
        return logsumexp(self.log_weights + log_ndtr(self._log_z(v)), axis=-1)

    def log_sf(self, v):
        return logsumexp(self.log_weights + log_ndtr(-self._log_z(v)), axis=-1)

    def cdf(self, v):
        return np.exp(self.log_cdf(v))

    def log_pdf_log(self, y):
        """Log-density of ``ln v`` at ``y``."""
        y = np.asarray(y, dtype=float)
        s = np.asarray(self.sigma)
        z = (y[..., None] - self.mu_log) / s
        return logsumexp(self.log_weights - 0.5 * z * z - np.log(s), axis=-1) - _LOG_SQRT_2PI

    def pdf(self, v):
        v = np.asarray(v, dtype=float)
        pos = v > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.log(np.where(pos, v, 1.0))
            return np.where(pos, np.exp(self.log_pdf_log(y) - y), 0.0)

    def log_transport(self, x):
        """``ln h(x)``: the log-space quantile of ``Phi(x)``."""
        x = np.asarray(x, dtype=float)
        return kernels.mixture_log_quantile(x.ravel(), self.mu_log, np.asarray(self.sigma), self.log_weights).reshape(x.shape)

    def transport_map(self, x):
        return np.exp(self.log_transport(x))

    def log_slope(self, x, y=None):
        """``d ln h / dx = phi(x) / f_Y(ln h(x))``, evaluated in log space."""
        x = np.asarray(x, dtype=float)
        if y is None:
            y = self.log_transport(x)
        return np.exp(-0.5 * x * x - _LOG_SQRT_2PI - self.log_pdf_log(y))

    def log_curvature(self, x, y=None):
        """Second derivative of ``ln h`` in ``x``."""
        x = np.asarray(x, dtype=float)
        if y is None:
            y = self.log_transport(x)
        yp = self.log_slope(x, y)
        s = np.asarray(self.sigma)
        z = (y[..., None] - self.mu_log) / s
        comp = self.log_weights - 0.5 * z * z - np.log(s)
        # f_Y'/f_Y as a weighted average of -z_i / sigma_i
        wts = np.exp(comp - logsumexp(comp, axis=-1)[..., None])
        score = np.sum(wts * (-z / s), axis=-1)
        return -x * yp - score * yp * yp

    def h_prime(self, x):
        x = np.asarray(x, dtype=float)
        y = self.log_transport(x)
        return np.exp(y) * self.log_slope(x, y)

    def h_second(self, x):
        x = np.asarray(x, dtype=float)
        y = self.log_transport(x)
        yp = self.log_slope(x, y)
        return np.exp(y) * (yp * yp + self.log_curvature(x, y))

    def inverse_transport(self, v):
        v = np.asarray(v, dtype=float)
        if np.any(v <= 0):
            raise ValueError("mixture inverse transport needs v > 0")
        lc = self.log_cdf(v)
        ls = self.log_sf(v)
        return np.where(lc <= math.log(0.5), ndtri_exp(lc), -ndtri_exp(ls))

    def antiderivative(self, x):
        """``A(x) = int_0^x h`` by composite Gauss-Legendre on the exact map."""
        x = np.asarray(x, dtype=float)
        return _gl_integral(self.transport_map, np.zeros(x.shape), x)

    @property
    def expected_value(self) -> float:
        return math.fsum(w * m for w, m in zip(self.weights, self.m))


DistributionSpec = Union[Normal, Lognormal, LognormalMixture]


def sample_v(spec: DistributionSpec, seed: int, n_paths: int = 1, first_path: int = 0):
    """Draw ``z ~ N(0, 1)`` per path and return ``(z, h(z))``."""
    z = standard_normals(seed, CH_VALUE, np.arange(first_path, first_path + n_paths), 1)[:, 0]
    return z, spec.transport_map(z)
