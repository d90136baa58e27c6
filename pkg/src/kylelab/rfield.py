"""The heat-equation field ``R(u, xi) = E[A(xi + sqrt(u) Z)]`` and its derivatives.

``A`` is the antiderivative of the transport map ``h`` anchored at 0, so
``R`` solves ``R_u = R_xixi / 2`` with ``R(0, .) = A``. Price and depth
follow from ``R_xi = E[h(xi + sqrt(u) Z)]`` and, by Gaussian integration by
parts, ``R_xixi = E[h(xi + sqrt(u) Z) Z] / sqrt(u)``.
"""
from __future__ import annotations

from functools import lru_cache
import math

import numpy as np

from kylelab import _fallback, kernels
from kylelab.dist import DistributionSpec, LognormalMixture, _gl_integral

_GL5_X, _GL5_W = np.polynomial.legendre.leggauss(5)


def gauss_hermite(order: int):
    """Probabilists' Gauss-Hermite nodes with weights normalised to sum to 1."""
    if order < 2:
        raise ValueError("quadrature order must be at least 2")
    z, w = np.polynomial.hermite_e.hermegauss(order)
    return z, w / math.sqrt(2.0 * math.pi)


def gaussian_panels(order: int, lo: float = -13.0, hi: float = 13.0, points: int = 16):
    """Composite Gauss-Legendre rule for ``E[f(Z)]`` on ``[lo, hi]``.

    Uses ``max(1, order // 4)`` equal panels of ``points`` nodes each. Unlike
    Gauss-Hermite, its accuracy depends only on local smoothness, which
    matters for mixture transport maps whose log-slope changes abruptly.
    """
    if order < 2:
        raise ValueError("quadrature order must be at least 2")
    panels = max(1, order // 4)
    X, W = np.polynomial.legendre.leggauss(points)
    width = (hi - lo) / panels
    a = lo + width * np.arange(panels)
    z = (a[:, None] + 0.5 * width * (X[None, :] + 1.0)).ravel()
    w = np.tile(0.5 * width * W, panels) * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return z, w


class _MixtureTable:
    """Cubic Hermite table of ``ln h`` plus a cumulative antiderivative table."""

    def __init__(self, spec: LognormalMixture, half_width: float, step: float, max_log_error: float = 1e-11):
        m = int(round(half_width / step))
        self.x0 = -m * step
        self.dx = step
        self.zero = m
        x = self.x0 + step * np.arange(2 * m + 1)
        self.x = x
        y = spec.log_transport(x)
        self.y = y
        dy = spec.log_slope(x, y)
        # Validate every cell at interior points against the exact map; cells
        # the cubic cannot resolve (density gaps between components) get NaN
        # slopes, which the kernels treat as a request for the exact solver.
        probe = x[:-1, None] + step * np.array([0.25, 0.5, 0.75])[None, :]
        approx = _fallback._hermite(probe.ravel(), self.x0, step, y, dy).reshape(probe.shape)
        err = np.abs(approx - spec.log_transport(probe.ravel()).reshape(probe.shape)).max(axis=1)
        bad = ~(err <= max_log_error)
        dy = dy.copy()
        dy[:-1][bad] = np.nan
        dy[1:][bad] = np.nan
        self.dy = dy
        self.flagged_cells = int(bad.sum())
        # Antiderivative at the nodes from the exact map, cell by cell.
        a, b = x[:-1], x[1:]
        pts = 0.5 * (a + b)[:, None] + 0.5 * step * _GL5_X[None, :]
        cell = 0.5 * step * (spec.transport_map(pts) @ _GL5_W)
        A = np.zeros_like(x)
        A[m + 1 :] = np.cumsum(cell[m:])
        A[:m] = -np.cumsum(cell[:m][::-1])[::-1]
        self.A = A


class RField:
    """Quadrature evaluator for ``R`` and its derivatives for one value law.

    Parameters
    ----------
    spec : DistributionSpec
        Law of the fundamental value.
    order : int
        Quadrature order (default 64). Normal and lognormal laws use
        Gauss-Hermite with this many nodes; mixtures use
        :func:`gaussian_panels` with ``order // 4`` panels.
    table_step, table_half_width : float
        Resolution and extent of the log-quantile table used for mixtures.
        Points outside the table fall back to the exact solver.
    """

    def __init__(self, spec: DistributionSpec, order: int = 64, table_step: float = 1.0 / 256,
                 table_half_width: float = 38.0):
        self.spec = spec
        self.order = self.quad_order = int(order)
        kind, p0, p1 = spec.kernel_params()
        if self.order < 16:
            raise ValueError(f"quadrature order must be at least 16, got {order}")
        if kind == kernels.KIND_MIXTURE:
            # Gaussian mass beyond 9.5 is ~1e-21; the upper edge is shifted by the
            # peak of h(xi + sqrt(u) z) phi(z), which sits at z <= max sigma for u <= 1.
            self.nodes, self.weights = gaussian_panels(self.order, -9.5, 9.5 + max(spec.sigma))
        else:
            self.nodes, self.weights = gauss_hermite(self.order)
        self._kind, self._p0, self._p1 = kind, p0, p1
        empty = np.zeros(0)
        if isinstance(spec, LognormalMixture):
            self.table = _MixtureTable(spec, table_half_width, table_step)
            self._args = (kind, p0, p1, spec.mu_log, np.asarray(spec.sigma), spec.log_weights,
                          self.table.x0, self.table.dx, self.table.y, self.table.dy)
        else:
            self.table = None
            self._args = (kind, p0, p1, empty, empty, empty, 0.0, 1.0, empty, empty)

    # transport map and antiderivative -------------------------------------------------
    def h(self, x):
        """Fast transport map (tabulated for mixtures)."""
        x = np.asarray(x, dtype=float)
        return kernels.transport_h(*self._args, x.ravel()).reshape(x.shape)

    def h_prime(self, x):
        return self.spec.h_prime(x)

    def A(self, x):
        """Antiderivative ``int_0^x h``."""
        x = np.asarray(x, dtype=float)
        if self.table is None:
            return self.spec.antiderivative(x)
        tb = self.table
        flat = x.ravel()
        out = np.empty_like(flat)
        s = (flat - tb.x0) / tb.dx
        j = np.floor(s)
        inside = (j >= 0) & (j < tb.x.size - 1)
        ji = np.where(inside, j, 0).astype(np.intp)
        base = tb.x[ji]
        d = flat - base
        pts = base[:, None] + 0.5 * d[:, None] * (_GL5_X[None, :] + 1.0)
        seg = 0.5 * d * (self.h(pts) @ _GL5_W)
        out[:] = tb.A[ji] + seg
        if not inside.all():
            far = ~inside
            xf = flat[far]
            edge = np.where(xf < tb.x0, 0, tb.x.size - 1)
            out[far] = tb.A[edge] + _gl_integral(self.spec.transport_map, tb.x[edge], xf)
        return out.reshape(x.shape)

    # field ---------------------------------------------------------------------------
    @staticmethod
    def _prep(u, xi):
        u, xi = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(xi, dtype=float))
        if np.any(u < 0) or np.any(u > 1.0 + 1e-12):
            raise ValueError("R is evaluated for u in [0, 1]")
        return u, xi

    def R(self, u, xi):
        u, xi = self._prep(u, xi)
        su = np.sqrt(u).ravel()
        pts = xi.ravel()[:, None] + su[:, None] * self.nodes[None, :]
        return (self.A(pts) @ self.weights).reshape(u.shape)

    def _moments(self, u, xi):
        su = np.sqrt(u).ravel()
        m0, m1 = kernels.gh_moments(*self._args, np.ascontiguousarray(xi.ravel()), su,
                                    self.nodes, self.weights)
        return su, m0, m1

    def R_xi(self, u, xi):
        """Conditional expectation ``E[h(xi + sqrt(u) Z)]``."""
        u, xi = self._prep(u, xi)
        _, m0, _ = self._moments(u, xi)
        return m0.reshape(u.shape)

    def R_xixi(self, u, xi):
        """Second derivative in ``xi``; closed form ``h'(xi)`` at ``u = 0``."""
        u, xi = self._prep(u, xi)
        su, _, m1 = self._moments(u, xi)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = m1 / su
        zero = su == 0
        if zero.any():
            out[zero] = self.h_prime(xi.ravel()[zero])
        return out.reshape(u.shape)

    def R_xi_and_xixi(self, u, xi):
        """Both derivatives from one quadrature pass."""
        u, xi = self._prep(u, xi)
        su, m0, m1 = self._moments(u, xi)
        with np.errstate(divide="ignore", invalid="ignore"):
            d2 = m1 / su
        zero = su == 0
        if zero.any():
            d2[zero] = self.h_prime(xi.ravel()[zero])
        return m0.reshape(u.shape), d2.reshape(u.shape)

    def R_conjugate(self, v):
        """Convex conjugate of ``R(0, .) = A`` at ``v``: ``v h^-1(v) - A(h^-1(v))``."""
        v = np.asarray(v, dtype=float)
        x = self.spec.inverse_transport(v)
        return v * x - self.A(x)

    def heat_residual(self, u, xi, du: float = 1e-3, dxi: float | None = None):
        """``R_u - R_xixi / 2`` with a fourth-order central difference in ``u``.

        ``R_xixi`` comes from integration by parts unless ``dxi`` is given, in
        which case a second central difference of ``R`` in ``xi`` is used.
        """
        u, xi = self._prep(u, xi)
        if np.any(u - 2 * du <= 0) or np.any(u + 2 * du > 1.0 + 1e-12):
            raise ValueError("heat residual needs u +- 2 du inside (0, 1]")
        Ru = (-self.R(u + 2 * du, xi) + 8 * self.R(u + du, xi) - 8 * self.R(u - du, xi)
              + self.R(u - 2 * du, xi)) / (12 * du)
        if dxi is None:
            Rxx = self.R_xixi(u, xi)
        else:
            Rxx = (self.R(u, xi + dxi) - 2 * self.R(u, xi) + self.R(u, xi - dxi)) / dxi**2
        return Ru - 0.5 * Rxx


@lru_cache(maxsize=16)
def rfield_for(spec: DistributionSpec, order: int = 64) -> RField:
    """Cached field evaluator; tables for mixtures are built once per law."""
    return RField(spec, order)
