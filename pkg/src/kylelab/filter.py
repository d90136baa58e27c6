"""Market-maker filtering: the singular BSDE for ``(G, U)`` and the derived ``Sigma``, ``lambda``.

Three backends produce a :class:`FiltrationSolution` on a grid:

* closed form for deterministic volatility;
* a finite-difference solver for the Markov CIR factor, written for the
  bounded ratio ``w = y / sqrt(T - t)``;
* least-squares Monte Carlo on the truncated Picard sequence, valid for any
  simulated volatility.

All of them work with ``y = sqrt(G) / L``, which solves
``y_t = int_t^T (J~^2 / (2 y) - z psi) du + int_t^T z dW`` with ``y_T = 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from kylelab.core import CH_REGRESSION, MarketParams, TimeGrid, brownian_increments
from kylelab.vol import (
    CIRClamped,
    Deterministic,
    LogDiffusion,
    VolModelSpec,
    VolPath,
    clamp_bounds,
    simulate_vol,
)


@dataclass(frozen=True, eq=False)
class FiltrationSolution:
    """Per-path ``G``, ``U``, ``Sigma`` and ``lambda`` on ``grid``, each ``(P, n + 1)``."""

    grid: TimeGrid
    G: np.ndarray
    U: np.ndarray
    Sigma: np.ndarray
    lam: np.ndarray
    method: str
    y: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.G.shape[0]


def _log_mean_inverse(a, b):
    """``ln(a / b) / (a - b)``, the exact integral of ``1/G`` under linear interpolation, per unit time."""
    d = a - b
    r = d / a
    small = np.abs(r) < 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = np.log(a / b) / d
    # series in r = (a - b)/a: (1 + r/2 + r^2/3) / a
    series = (1.0 + r * (0.5 + r / 3.0)) / a
    return np.where(small, series, exact)


def compute_sigma_lambda(G, sigma, params: MarketParams, grid: TimeGrid):
    """``Sigma = exp(-int rho_hat^2 sigma^2 / G ds)`` and ``lambda = sqrt(Sigma / G)``.

    On each step ``sigma`` is frozen at the left node and ``1/G`` is
    integrated exactly under linear interpolation of ``G``. The interpolant
    vanishes at ``T``, so the final factor is exactly zero and ``Sigma_T = 0``;
    for deterministic volatility the rule reproduces ``G / G_0`` exactly.
    ``lambda_T`` is set to its left limit.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    n = grid.n
    if G.shape[1] != n + 1:
        raise ValueError("G must be aligned to the grid")
    if np.any(~(G[:, :-1] > 0)):
        raise ValueError("G must be positive before maturity")
    rate = params.rho_hat**2 * sigma[:, :-1] ** 2 * grid.dt
    expo = np.empty_like(rate)
    expo[:, :-1] = rate[:, :-1] * _log_mean_inverse(G[:, :-2], G[:, 1:-1])
    expo[:, -1] = np.inf
    logS = np.zeros_like(G)
    np.cumsum(-expo, axis=1, out=logS[:, 1:])
    Sigma = np.exp(logS)
    Sigma[:, -1] = 0.0
    lam = np.empty_like(G)
    lam[:, :-1] = np.sqrt(Sigma[:, :-1] / G[:, :-1])
    lam[:, -1] = lam[:, -2]
    return Sigma, lam


def unit_budget(sol: FiltrationSolution, sigma, params: MarketParams):
    """Per-path left-point quadrature of ``int_0^T rho_hat^2 lambda^2 sigma^2 ds`` (ideally 1)."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    lam = sol.lam[:, :-1]
    return params.rho_hat**2 * np.sum(lam**2 * sigma[:, :-1] ** 2 * sol.grid.dt, axis=1)


def envelope_violation(y, J_minus, J_plus, params: MarketParams, grid: TimeGrid, tol: float = 1e-9):
    """Largest breach of ``rho_hat J- sqrt(T-t) <= y <= rho_hat J+ sqrt(T-t)``, relative to the bound."""
    st = np.sqrt(grid.tau)
    lo = params.rho_hat * J_minus * st
    hi = params.rho_hat * J_plus * st
    with np.errstate(divide="ignore", invalid="ignore"):
        below = np.where(lo > 0, (lo - y) / lo, 0.0)
        above = np.where(hi > 0, (y - hi) / hi, 0.0)
    worst = float(max(np.max(below[:, :-1]), np.max(above[:, :-1]), 0.0))
    return worst if worst > tol else 0.0


def _broadcast(a, P):
    return np.ascontiguousarray(np.broadcast_to(a, (P, a.shape[-1])))


def solve_deterministic(spec: Deterministic, params: MarketParams, grid: TimeGrid, n_paths: int = 1):
    """Closed form ``G_t = rho_hat^2 int_t^T sigma^2``, ``U = 0``, ``Sigma = G/G_0``, ``lambda = G_0^-1/2``."""
    if not isinstance(spec, Deterministic):
        raise TypeError("closed form needs deterministic volatility")
    G = params.rho_hat**2 * spec.integrated_variance(grid.nodes, grid.T)
    G[-1] = 0.0
    G0 = G[0]
    Sigma = G / G0
    lam = np.full(grid.n + 1, 1.0 / math.sqrt(G0))
    y = np.sqrt(G)
    P = int(n_paths)
    return FiltrationSolution(grid, _broadcast(G, P), np.zeros((P, grid.n + 1)), _broadcast(Sigma, P),
                              _broadcast(lam, P), "closed-form", _broadcast(y, P))


def _finish(grid, params, G, U, sigma, method, y, diagnostics):
    Sigma, lam = compute_sigma_lambda(G, sigma, params, grid)
    return FiltrationSolution(grid, G, U, Sigma, lam, method, y, diagnostics)


class ClosedFormSolver:
    """Backend wrapper for deterministic volatility."""

    method = "closed-form"

    def __init__(self, spec: Deterministic, params: MarketParams, grid: TimeGrid):
        self.spec, self.params, self.grid = spec, params, grid
        self.diagnostics = {"method": self.method}

    def evaluate(self, vol: VolPath) -> FiltrationSolution:
        return solve_deterministic(self.spec, self.params, self.grid, vol.n_paths)


# --------------------------------------------------------------------------------------
# Markov CIR backend
# --------------------------------------------------------------------------------------


class MarkovPDESolution:
    """Solution ``w(tau, r)`` on a cell-centred mesh in ``r = sqrt(v)``.

    ``w`` has one row per grid node (row ``i`` holds ``tau = T - t_i``) and is
    related to the auxiliary BSDE by ``y = sqrt(tau) w``.
    """

    method = "markov-pde"

    def __init__(self, spec, params, grid, r, w, diagnostics):
        self.spec, self.params, self.grid = spec, params, grid
        self.r = r
        self.w = w
        self.diagnostics = diagnostics

    def y_field(self):
        return np.sqrt(self.grid.tau)[:, None] * self.w

    def evaluate(self, vol: VolPath) -> FiltrationSolution:
        """``G = tau w^2`` and ``U = eta tau w w_r`` along simulated factor paths."""
        if vol.V is None:
            raise ValueError("Markov backend needs factor paths")
        g = self.grid
        tau = g.tau
        rp = np.sqrt(np.maximum(vol.V, 0.0))
        P = rp.shape[0]
        G = np.zeros((P, g.n + 1))
        U = np.zeros((P, g.n + 1))
        y = np.zeros((P, g.n + 1))
        for i in range(g.n):
            wi = np.interp(rp[:, i], self.r, self.w[i])
            wr = np.interp(rp[:, i], self.r, np.gradient(self.w[i], self.r))
            y[:, i] = math.sqrt(tau[i]) * wi
            G[:, i] = tau[i] * wi * wi
            U[:, i] = self.spec.eta * tau[i] * wi * wr
        diag = dict(self.diagnostics)
        jm, jp, _ = clamp_bounds(self.spec)
        diag["path_envelope_violation"] = envelope_violation(y, jm, jp, self.params, g)
        return _finish(g, self.params, G, U, vol.sigma, self.method, y, diag)


def _mesh_top(spec: CIRClamped, T: float) -> float:
    m = max(spec.x0, spec.a / spec.k)
    sd = spec.eta * math.sqrt(m / (2 * spec.k) * (1.0 - math.exp(-2 * spec.k * T)) + m * T * 1e-3)
    v_hi = m + 10.0 * sd + spec.eta**2 * T
    return max(math.sqrt(v_hi), 1.25 * spec.sigma_high)


def solve_markov_pde(spec: CIRClamped, params: MarketParams, grid: TimeGrid, n_r: int = 200,
                     substeps: int = 2, r_max: float | None = None, newton_tol: float = 1e-13):
    """Backward Euler with Newton for ``w_tau = L w + (J~^2 - w^2) / (2 tau w)``.

    ``L`` is the CIR generator in ``r = sqrt(v)``: drift
    ``(4a - eta^2)/(8r) - k r / 2`` and diffusion ``eta^2 / 8``. Drift is
    differenced centrally where the cell Peclet number allows it and upwind
    otherwise, so the implicit operator is an M-matrix. Both boundaries are
    reflecting, ``w(0, r) = rho_hat f(r^2)`` with ``f`` the clamp map, and
    the time mesh refines every grid interval into ``substeps`` pieces.
    """
    if not isinstance(spec, CIRClamped):
        raise TypeError("Markov PDE backend needs a clamped CIR model")
    rho_hat = params.rho_hat
    top = r_max if r_max is not None else _mesh_top(spec, grid.T)
    dr = top / n_r
    r = (np.arange(n_r) + 0.5) * dr
    Jt = rho_hat * (spec.sigma_low + np.minimum(r, spec.sigma_high))
    D = spec.eta**2 / 8.0
    mu = (4 * spec.a - spec.eta**2) / (8.0 * r) - 0.5 * spec.k * r
    central = np.abs(mu) * dr <= 2 * D
    lower = np.where(central, D / dr**2 - mu / (2 * dr), D / dr**2 + np.where(mu < 0, -mu / dr, 0.0))
    upper = np.where(central, D / dr**2 + mu / (2 * dr), D / dr**2 + np.where(mu > 0, mu / dr, 0.0))
    # Reflecting ghosts fold the outer coefficient back onto the diagonal.
    diag = -(lower + upper)
    diag[0] += lower[0]
    diag[-1] += upper[-1]
    lo_band = lower[1:]
    up_band = upper[:-1]

    tau_nodes = grid.tau[::-1]  # ascending from 0
    n = grid.n
    W = np.empty((n + 1, n_r))
    W[0] = Jt
    w = Jt.copy()
    newton_iters = 0
    max_res = 0.0
    for s in range(n):
        t0, t1 = tau_nodes[s], tau_nodes[s + 1]
        for q in range(substeps):
            ta = t0 + (t1 - t0) * q / substeps
            tb = t0 + (t1 - t0) * (q + 1) / substeps
            h = tb - ta
            w_prev = w
            w = w_prev.copy()
            for _ in range(50):
                Aw = diag * w
                Aw[1:] += lo_band * w[:-1]
                Aw[:-1] += up_band * w[1:]
                F = (w - w_prev) / h - Aw - (Jt**2 - w**2) / (2 * tb * w)
                ab = np.zeros((3, n_r))
                ab[0, 1:] = -up_band
                ab[1] = 1.0 / h - diag + (Jt**2 + w**2) / (2 * tb * w**2)
                ab[2, :-1] = -lo_band
                delta = solve_banded((1, 1), ab, F)
                w = w - delta
                newton_iters += 1
                if np.max(np.abs(delta)) <= newton_tol * np.max(np.abs(w)):
                    break
            max_res = max(max_res, float(np.max(np.abs(delta))))
        W[s + 1] = w
    W = W[::-1].copy()  # row i <-> grid node i
    lo_b = rho_hat * spec.sigma_low
    hi_b = rho_hat * (spec.sigma_low + spec.sigma_high)
    viol = np.maximum((lo_b - W) / lo_b, (W - hi_b) / hi_b)
    worst = float(max(viol.max(), 0.0))
    diagnostics = {
        "method": "markov-pde",
        "mesh": [int(n + 1), int(n_r)],
        "substeps": int(substeps),
        "r_max": float(top),
        "newton_iterations": int(newton_iters),
        "last_newton_step": max_res,
        "bound_violation": worst if worst > 1e-12 else 0.0,
        "bound_violation_fraction": float(np.mean(viol > 1e-12)),
        "mesh_too_coarse": bool(worst > 0.05),
    }
    return MarkovPDESolution(spec, params, grid, r, W, diagnostics)


# --------------------------------------------------------------------------------------
# Least-squares Monte Carlo backend
# --------------------------------------------------------------------------------------


def regression_basis(vol: VolPath, i: int, degree: int = 3) -> np.ndarray:
    """Polynomial features of the time-``t_i`` state.

    Factor models use powers of ``sigma`` and of ``sqrt(V+)`` (the latter
    resolves the clamp kink); other models use powers of ``ln sigma``.
    """
    cols = [np.ones(vol.n_paths)]
    if vol.V is not None:
        s = vol.sigma[:, i]
        x = np.sqrt(np.maximum(vol.V[:, i], 0.0))
        for d in range(1, degree + 1):
            cols.append(s**d)
        for d in range(1, degree + 1):
            cols.append(x**d)
    else:
        ell = np.log(vol.sigma[:, i])
        for d in range(1, degree + 1):
            cols.append(ell**d)
    return np.column_stack(cols)


class LSMCSolution:
    """Regression coefficients for ``y`` (and ``z``) per step, for the selected Picard level."""

    method = "picard-lsmc"

    def __init__(self, spec, params, grid, coef_y, coef_z, degree, diagnostics):
        self.spec, self.params, self.grid = spec, params, grid
        self.coef_y = coef_y
        self.coef_z = coef_z
        self.degree = degree
        self.diagnostics = diagnostics

    def evaluate(self, vol: VolPath) -> FiltrationSolution:
        g = self.grid
        P = vol.n_paths
        y = np.zeros((P, g.n + 1))
        z = np.zeros((P, g.n + 1))
        for i in range(g.n):
            X = regression_basis(vol, i, self.degree)
            y[:, i] = np.maximum(X @ self.coef_y[i], 0.0)
            z[:, i] = X @ self.coef_z[i]
        G = y * y * vol.L**2
        U = np.zeros_like(G)
        with np.errstate(divide="ignore", invalid="ignore"):
            U[:, :-1] = 2 * G[:, :-1] * (vol.psi[:, :-1] - z[:, :-1] / y[:, :-1])
        diag = dict(self.diagnostics)
        jm, jp, heur = clamp_bounds(vol.spec, g.T) if vol.spec is not None else (None, None, True)
        if jm is not None:
            diag["path_envelope_violation"] = envelope_violation(y, jm, jp, self.params, g, tol=1e-3)
        diag["envelope_check_heuristic"] = bool(heur)
        return _finish(g, self.params, G, U, vol.sigma, self.method, y, diag)


def solve_picard_lsmc(spec: VolModelSpec, params: MarketParams, grid: TimeGrid, n_paths: int = 10_000,
                      seed: int = 0, degree: int = 3, tol: float = 1e-4, n_iter: int = 16,
                      growth: int = 4) -> LSMCSolution:
    """Backward regression for the truncated Picard sequence ``y^n``.

    Level ``n`` replaces ``1/(2y)`` by ``1/(2(J~_0/n + y))``; over one step
    with ``J~`` frozen the exact flow is
    ``y_i = sqrt((eps + y_{i+1})^2 + J~_i^2 dt) - eps`` with ``eps = J~_0/n``.
    Levels ``n = growth^k`` for ``k < n_iter`` share one backward pass (one
    least-squares factorisation per step). The solver returns the first level
    whose sup relative change from the previous level is below ``tol``.

    Raises
    ------
    RuntimeError
        If no level meets the tolerance.
    """
    rho_hat = params.rho_hat
    idx = np.arange(n_paths)
    dW = brownian_increments(grid, seed, CH_REGRESSION, idx)
    vol = simulate_vol(spec, grid, dW)
    Jt = rho_hat * vol.J
    levels = growth ** np.arange(n_iter, dtype=float)
    eps = float(np.mean(Jt[:, 0])) / levels
    L = levels.size
    n = grid.n
    dt = grid.dt
    use_z = bool(np.any(vol.psi != 0))
    p = regression_basis(vol, 0, degree).shape[1]
    coef_y = np.zeros((L, n, p))
    coef_z = np.zeros((L, n, p))
    y_next = np.zeros((n_paths, L))
    y_store = np.zeros((L, n_paths, n))
    for i in range(n - 1, -1, -1):
        X = regression_basis(vol, i, degree)
        Xp = np.linalg.pinv(X, rcond=1e-10)
        phi = np.sqrt((eps + y_next) ** 2 + (Jt[:, i, None] ** 2) * dt[i]) - eps
        bz = -(Xp @ (y_next * dW[:, i, None])) / dt[i]
        if use_z:
            phi = phi - vol.psi[:, i, None] * (X @ bz) * dt[i]
        by = Xp @ phi
        fit_y = X @ by
        y_next = np.maximum(fit_y, 0.0)
        coef_y[:, i] = by.T
        coef_z[:, i] = bz.T
        y_store[:, :, i] = y_next.T
    # Convergence in the Picard level.
    changes = []
    mono = []
    chosen = None
    scale = np.max(y_store[-1])
    for k in range(1, L):
        a, b = y_store[k - 1], y_store[k]
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(b > 0, np.abs(b - a) / b, 0.0)
        changes.append(float(rel.max()))
        mono.append(float(np.mean(b - a >= -1e-8 * scale)))
        if chosen is None and changes[-1] < tol:
            chosen = k
    diagnostics = {
        "method": "picard-lsmc",
        "regression_paths": int(n_paths),
        "basis_degree": int(degree),
        "levels": [float(x) for x in levels],
        "sup_relative_change": changes,
        "monotone_fraction": mono,
        "y0_by_level": [float(np.mean(y_store[k][:, 0])) for k in range(L)],
        "converged": chosen is not None,
        "selected_level": None if chosen is None else float(levels[chosen]),
    }
    if chosen is None:
        err = RuntimeError(f"Picard sequence did not reach tolerance {tol} within {n_iter} levels")
        err.diagnostics = diagnostics
        raise err
    return LSMCSolution(spec, params, grid, coef_y[chosen], coef_z[chosen], degree, diagnostics)


def build_solver(spec: VolModelSpec, params: MarketParams, grid: TimeGrid, backend: str = "auto", **opts):
    """Filtering backend with an ``evaluate(vol_path)`` method.

    ``auto`` picks the closed form for deterministic volatility, the Markov
    PDE for clamped CIR and least-squares Monte Carlo otherwise.
    """
    if backend == "auto":
        if isinstance(spec, Deterministic):
            backend = "closed-form"
        elif isinstance(spec, CIRClamped):
            backend = "markov-pde"
        else:
            backend = "picard-lsmc"
    if backend == "closed-form":
        return ClosedFormSolver(spec, params, grid)
    if backend == "markov-pde":
        keys = ("n_r", "substeps", "r_max")
        return solve_markov_pde(spec, params, grid, **{k: opts[k] for k in keys if k in opts})
    if backend == "picard-lsmc":
        keys = ("n_paths", "seed", "degree", "tol", "n_iter", "growth")
        return solve_picard_lsmc(spec, params, grid, **{k: opts[k] for k in keys if k in opts})
    raise ValueError(f"unknown filtering backend {backend!r}")


def bsde_residual(sol: FiltrationSolution, vol: VolPath, params: MarketParams):
    """Pathwise cumulative residual of ``dG = -(rho_hat^2 sigma^2 - U^2/(4G)) dt + U dW``.

    Returns ``(rms, mean)`` over paths of the residual summed up to the
    second-to-last node (the final step is where ``G`` hits 0).
    """
    G, U = sol.G, sol.U
    dt = sol.grid.dt
    n = sol.grid.n
    with np.errstate(divide="ignore", invalid="ignore"):
        drift = params.rho_hat**2 * vol.sigma[:, :-1] ** 2 - U[:, :-1] ** 2 / (4 * G[:, :-1])
    inc = np.diff(G, axis=1) + drift * dt - U[:, :-1] * vol.dW
    res = inc[:, : n - 1].sum(axis=1)
    return float(np.sqrt(np.mean(res**2))), float(np.mean(res))
