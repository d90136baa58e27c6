"""Equilibrium paths, realized profit, deviations and the Monte Carlo verifier."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from kylelab.core import CH_B, CH_W, MarketParams, TimeGrid, brownian_increments, cumulative, make_grid
from kylelab.dist import DistributionSpec, Lognormal, sample_v
from kylelab.filter import FiltrationSolution, build_solver, unit_budget
from kylelab.rfield import RField, rfield_for
from kylelab.vol import Deterministic, VolModelSpec, simulate_vol


@dataclass(frozen=True, eq=False)
class Scenario:
    """Everything needed to simulate one equilibrium."""

    market: MarketParams
    dist: DistributionSpec
    vol: VolModelSpec
    grid: TimeGrid
    backend: str = "auto"
    solver_options: dict = field(default_factory=dict)
    quad_order: int = 64

    @classmethod
    def build(cls, market, dist, vol, n=200, refinement="geometric", factor=0.5, **kw):
        return cls(market, dist, vol, make_grid(n, market.T, refinement, factor), **kw)


@dataclass(frozen=True, eq=False)
class EquilibriumPath:
    """A batch of equilibrium paths; arrays are ``(P, n + 1)`` unless noted."""

    grid: TimeGrid
    xi: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Y_hat: np.ndarray
    P: np.ndarray
    Lambda: np.ndarray
    depth: np.ndarray
    Pi: np.ndarray
    v: np.ndarray  # (P,)
    z: np.ndarray  # (P,)
    Pi_T: np.ndarray  # (P,) primary u-coordinate computation
    Pi_T_time: np.ndarray  # (P,) secondary time-clock computation
    filtration: FiltrationSolution
    sigma: np.ndarray
    dW: np.ndarray  # (P, n)
    noise: np.ndarray  # (P, n) state innovation lambda rho_hat sigma dB per step
    method: str = "bridge"

    @property
    def terminal_xi_error(self) -> float:
        return float(np.max(np.abs(self.xi[:, -1] - self.z)))

    @property
    def terminal_price_error(self) -> float:
        return float(np.max(np.abs(self.P[:, -1] - self.v) / np.maximum(np.abs(self.v), 1.0)))

    @property
    def step_identity_error(self) -> float:
        """``max |d xi - lambda dY_hat|`` over all steps and paths."""
        lam = self.filtration.lam[:, :-1]
        return float(np.max(np.abs(np.diff(self.xi, axis=1) - lam * np.diff(self.Y_hat, axis=1))))


def simulate_state(filt: FiltrationSolution, z, dB, sigma=None, params: MarketParams | None = None,
                   method: str = "bridge"):
    """State paths ``xi`` and per-step innovations ``lambda rho_hat sigma dB``.

    ``bridge`` samples the Gaussian bridge pinned at 0 and ``z`` exactly in
    the clock ``u = 1 - Sigma``, using the standardized increments of ``B``;
    ``xi_T = z`` holds exactly. ``euler`` steps the state SDE explicitly up to
    the last interval and then jumps to ``z``; it needs ``sigma`` and ``params``.
    """
    Sigma = filt.Sigma
    z = np.asarray(z, dtype=float)
    dB = np.asarray(dB, dtype=float)
    if np.any(np.diff(Sigma, axis=1) >= 0):
        raise ValueError("Sigma must be strictly decreasing")
    P, n1 = Sigma.shape
    n = n1 - 1
    dt = filt.grid.dt
    xi = np.zeros((P, n + 1))
    noise = np.zeros((P, n))
    if method == "bridge":
        eps = dB / np.sqrt(dt)
        du = Sigma[:, :-1] - Sigma[:, 1:]
        frac = du / Sigma[:, :-1]
        sd = np.sqrt(du * Sigma[:, 1:] / Sigma[:, :-1])
        for i in range(n):
            noise[:, i] = sd[:, i] * eps[:, i]
            xi[:, i + 1] = xi[:, i] + (z - xi[:, i]) * frac[:, i] + noise[:, i]
        xi[:, n] = z
    elif method == "euler":
        if sigma is None or params is None:
            raise ValueError("euler scheme needs sigma and params")
        lam = filt.lam
        rh = params.rho_hat
        for i in range(n - 1):
            drift = lam[:, i] ** 2 * rh**2 * sigma[:, i] ** 2 / Sigma[:, i] * (z - xi[:, i]) * dt[i]
            noise[:, i] = rh * lam[:, i] * sigma[:, i] * dB[:, i]
            xi[:, i + 1] = xi[:, i] + drift + noise[:, i]
        xi[:, n] = z
    else:
        raise ValueError(f"unknown state scheme {method!r}")
    return xi, noise


def insider_strategy(xi, filt: FiltrationSolution, z, sigma, dW, noise, params: MarketParams,
                     method: str = "bridge"):
    """Insider position ``X``, total flow ``Y = X + Z`` and informative flow ``Y_hat``.

    ``bridge`` uses the u-clock rule ``dX = (1/lambda)(z - xi) du / Sigma``;
    ``euler`` uses the time-clock rate ``lambda rho_hat^2 sigma^2 (z - xi) / Sigma``.
    The noise-trading increment orthogonal to ``W`` is read off the state
    innovation, so ``d xi = lambda dY_hat`` holds step by step.
    """
    lam = filt.lam[:, :-1]
    Sigma = filt.Sigma
    gap = np.asarray(z, dtype=float)[:, None] - xi[:, :-1]
    if method == "bridge":
        du = Sigma[:, :-1] - Sigma[:, 1:]
        dX = gap * du / (lam * Sigma[:, :-1])
    else:
        dX = lam * params.rho_hat**2 * sigma[:, :-1] ** 2 * gap / Sigma[:, :-1] * filt.grid.dt
    informative_noise = noise / lam  # rho_hat sigma dB
    dZ = informative_noise + params.rho * sigma[:, :-1] * dW
    X = cumulative(dX)
    Y = X + cumulative(dZ)
    Y_hat = X + cumulative(informative_noise)
    return X, Y, Y_hat


def price_and_lambda(xi, filt: FiltrationSolution, rfield: RField):
    """``P = R_xi(Sigma, xi)``, ``Lambda = lambda R_xixi(Sigma, xi)`` and depth ``1 / Lambda``."""
    P, d2 = rfield.R_xi_and_xixi(np.clip(filt.Sigma, 0.0, 1.0), xi)
    Lam = filt.lam * d2
    with np.errstate(divide="ignore"):
        depth = 1.0 / Lam
    return P, Lam, depth


def realized_profit(v, P, X, X_time=None):
    """Running profit ``sum (v - P_i) dX_i``, its terminal value and a secondary terminal value.

    ``X`` should come from the u-clock rule. The secondary value repeats the
    sum along ``X_time``, the position built from the time-clock rate, and
    is ``None`` when that is not given.
    """
    v = np.asarray(v, dtype=float)[:, None]
    Pi = cumulative((v - P[:, :-1]) * np.diff(X, axis=1))
    secondary = None
    if X_time is not None:
        secondary = np.sum((v - P[:, :-1]) * np.diff(X_time, axis=1), axis=1)
    return Pi, Pi[:, -1], secondary


def profit_bound(rfield: RField, v, lam0):
    """``(R(1, 0) + R^c(0, v)) / lambda_0``, the conditional expected equilibrium profit."""
    return (float(rfield.R(1.0, 0.0)) + rfield.R_conjugate(v)) / lam0


def _state_batch(scn: Scenario, solver, paths, seed: int, method: str, frozen_w: bool, threads: int):
    paths = np.asarray(paths, dtype=np.int64)
    if paths.size and not np.array_equal(paths, np.arange(paths[0], paths[0] + paths.size)):
        raise ValueError("path indices must be contiguous")
    g = scn.grid
    if frozen_w:
        dW = np.repeat(brownian_increments(g, seed, CH_W, [0]), paths.size, axis=0)
    else:
        dW = brownian_increments(g, seed, CH_W, paths, threads)
    dB = brownian_increments(g, seed, CH_B, paths, threads)
    z, v = sample_v(scn.dist, seed, paths.size, int(paths[0]) if paths.size else 0)
    vol = simulate_vol(scn.vol, g, dW)
    filt = solver.evaluate(vol)
    xi, noise = simulate_state(filt, z, dB, vol.sigma, scn.market, method)
    return vol, filt, z, v, xi, noise


def simulate_equilibrium(scn: Scenario, solver, rfield: RField, paths, seed: int, method: str = "bridge",
                         frozen_w: bool = False, threads: int = 1) -> EquilibriumPath:
    """Run the vol, filter and equilibrium pipeline for the given contiguous path indices.

    With ``frozen_w`` every path shares the ``W`` draw of path 0, so
    ``Sigma`` and ``lambda`` are common and conditional laws can be tested.
    """
    vol, filt, z, v, xi, noise = _state_batch(scn, solver, paths, seed, method, frozen_w, threads)
    X, Y, Y_hat = insider_strategy(xi, filt, z, vol.sigma, vol.dW, noise, scn.market, method)
    X_time, _, _ = insider_strategy(xi, filt, z, vol.sigma, vol.dW, noise, scn.market, "euler")
    P, Lam, depth = price_and_lambda(xi, filt, rfield)
    Pi, Pi_T, secondary = realized_profit(v, P, X, X_time)
    return EquilibriumPath(scn.grid, xi, X, Y, Y_hat, P, Lam, depth, Pi, v, z, Pi_T, secondary, filt, vol.sigma,
                           vol.dW, noise, method)


# --------------------------------------------------------------------------------------
# deviations
# --------------------------------------------------------------------------------------


@dataclass(frozen=True)
class Scaled:
    """Trade ``c`` times the equilibrium increments (open loop)."""

    c: float

    @property
    def name(self):
        return f"scaled_{self.c:g}"


@dataclass(frozen=True)
class DelayedStart:
    """Stay out until ``t0``, then steer the market's state towards ``z``."""

    t0: float

    @property
    def name(self):
        return f"delayed_{self.t0:g}"


@dataclass(frozen=True)
class WrongTarget:
    """Steer the market's state towards ``z + shift`` instead of ``z``."""

    shift: float = 1.0

    @property
    def name(self):
        return f"wrong_target_{self.shift:g}"


def deviation_profit(strategy, bundle: EquilibriumPath, rfield: RField):
    """Terminal profit of an absolutely continuous deviation, per path.

    The market maker keeps applying the equilibrium pricing rule to the
    deviated order flow: ``xi_{i+1} = xi_i + lambda_i dX_i + (noise innovation)_i``
    and ``P_i = R_xi(Sigma_i, xi_i)``.
    """
    filt = bundle.filtration
    lam = filt.lam
    Sigma = filt.Sigma
    n = bundle.grid.n
    P_eq = bundle.P
    v = bundle.v
    if isinstance(strategy, Scaled):
        dX = strategy.c * np.diff(bundle.X, axis=1)
        if strategy.c == 0:
            return np.zeros(v.size)
        xi = np.zeros_like(bundle.xi)
        xi[:, 1:] = np.cumsum(lam[:, :-1] * dX + bundle.noise, axis=1)
        if strategy.c == 1:
            xi = bundle.xi
    elif isinstance(strategy, (DelayedStart, WrongTarget)):
        target = bundle.z + (strategy.shift if isinstance(strategy, WrongTarget) else 0.0)
        start = strategy.t0 if isinstance(strategy, DelayedStart) else 0.0
        active = bundle.grid.nodes[:-1] >= start
        du = Sigma[:, :-1] - Sigma[:, 1:]
        xi = np.zeros_like(bundle.xi)
        dX = np.zeros((v.size, n))
        for i in range(n):
            if active[i]:
                dX[:, i] = (target - xi[:, i]) * du[:, i] / (lam[:, i] * Sigma[:, i])
            xi[:, i + 1] = xi[:, i] + lam[:, i] * dX[:, i] + bundle.noise[:, i]
    else:
        raise TypeError(f"unsupported deviation {strategy!r}")
    P = P_eq if xi is bundle.xi else rfield.R_xi(np.clip(Sigma[:, :-1], 0.0, 1.0), xi[:, :-1])
    if P.shape[1] == n + 1:
        P = P[:, :-1]
    return np.sum((v[:, None] - P) * dX, axis=1)


DEFAULT_DEVIATIONS = (Scaled(0.0), Scaled(0.5), Scaled(2.0), WrongTarget(1.0))


# --------------------------------------------------------------------------------------
# Monte Carlo report
# --------------------------------------------------------------------------------------


@dataclass
class Check:
    name: str
    estimate: float
    se: float
    target: float
    passed: bool
    rule: str
    informational: bool = False


@dataclass
class McReport:
    checks: list
    n_paths: int
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if not c.informational)

    def failed(self):
        return [c for c in self.checks if not c.passed and not c.informational]

    def get(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def select(self, prefix: str):
        return [c for c in self.checks if c.name.startswith(prefix)]

    def to_dict(self):
        return {
            "n_paths": self.n_paths,
            "seed": self.seed,
            "passed": self.passed,
            "meta": self.meta,
            "checks": [asdict(c) for c in self.checks],
        }


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    m = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("inf")
    return m, se


def _two_sided(name, x, atol, target=0.0):
    m, se = _mean_se(x)
    return Check(name, m, se, target, bool(abs(m - target) <= 3 * se + atol), "|est - target| <= 3 SE")


def _lower(name, x, atol):
    m, se = _mean_se(x)
    return Check(name, m, se, 0.0, bool(m >= -se - atol), "est >= -1 SE")


def bucket_edges(grid: TimeGrid, n_buckets: int):
    return [grid.index_of(grid.T * k / n_buckets) for k in range(n_buckets + 1)]


def _bucket_stats(b: EquilibriumPath, edges):
    """Per-path bucket increments used by the drift tests."""
    inv_lam = 1.0 / b.filtration.lam
    W = cumulative(b.dW)
    out = {}
    for key, arr in (("xi", b.xi), ("P", b.P), ("inv_lambda", inv_lam), ("Lambda", b.Lambda),
                     ("depth", b.depth), ("X", b.X)):
        out[key] = np.column_stack([arr[:, e1] - arr[:, e0] for e0, e1 in zip(edges[:-1], edges[1:])])
    out["orth"] = np.column_stack([(b.xi[:, e1] - b.xi[:, e0]) * (W[:, e1] - W[:, e0])
                                   for e0, e1 in zip(edges[:-1], edges[1:])])
    return out


def _run_batches(fn, batches, threads):
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, batches))
    return [fn(bt) for bt in batches]


def mc_report(scn: Scenario, n_paths: int, seed: int, threads: int = 1, batch_size: int = 1000,
              n_buckets: int = 4, deviations=DEFAULT_DEVIATIONS, conditional: bool = True,
              conditional_times=(0.25, 0.5, 0.75), solver=None) -> McReport:
    """Statistical verification of the equilibrium on ``n_paths`` paths.

    Drift tests use ``n_buckets`` equal time buckets. Martingale drifts and
    inconspicuousness pass within 3 SE of zero, submartingale drifts within
    -1 SE. Conditional-law tests rerun the pipeline with one frozen ``W``
    path so that ``Sigma`` is common across paths.
    """
    if solver is None:
        solver = build_solver(scn.vol, scn.market, scn.grid, scn.backend, **scn.solver_options)
    rf = rfield_for(scn.dist, scn.quad_order)
    g = scn.grid
    edges = bucket_edges(g, n_buckets)
    starts = list(range(0, n_paths, batch_size))
    batches = [np.arange(s, min(s + batch_size, n_paths)) for s in starts]

    def work(idx):
        b = simulate_equilibrium(scn, solver, rf, idx, seed)
        lam0 = b.filtration.lam[:, 0]
        res = {
            "profit": b.Pi_T,
            "profit_time": b.Pi_T_time,
            "bound": profit_bound(rf, b.v, lam0),
            "budget": unit_budget(b.filtration, b.sigma, scn.market),
            "terminal_xi": b.terminal_xi_error,
            "terminal_price": b.terminal_price_error,
            "identity": b.step_identity_error,
            "scale": float(np.max(np.abs(b.xi))),
            "p_scale": float(np.max(np.abs(b.P))),
            "lam_scale": float(np.max(np.abs(b.Lambda[:, :-1]))),
            "min_Lambda": float(np.min(b.Lambda[:, :-1])),
        }
        res.update(_bucket_stats(b, edges))
        for dev in deviations:
            res["dev_" + dev.name] = deviation_profit(dev, b, rf)
        return res

    parts = _run_batches(work, batches, threads)

    def cat(key):
        return np.concatenate([np.atleast_1d(p[key]) for p in parts])

    checks = []
    profit, bound = cat("profit"), cat("bound")
    c = _two_sided("profit_formula", profit - bound, 0.0)
    c.estimate, c.target = float(np.mean(profit)), float(np.mean(bound))
    checks.append(c)
    # Degenerate processes have exactly zero increments; allow rounding.
    atol_xi = 1e-10 * max(p["scale"] for p in parts)
    atol_p = 1e-10 * max(p["p_scale"] for p in parts)
    atol_l = 1e-10 * max(p["lam_scale"] for p in parts)
    for key, label, atol in (("xi", "martingale_xi", atol_xi), ("P", "martingale_P", atol_p),
                             ("inv_lambda", "martingale_inv_lambda", 1e-10)):
        arr = cat(key)
        for k in range(n_buckets):
            checks.append(_two_sided(f"{label}_b{k}", arr[:, k], atol))
    for key, label, atol in (("Lambda", "submartingale_Lambda", atol_l), ("depth", "submartingale_depth", 1e-10)):
        arr = cat(key)
        for k in range(n_buckets):
            if key == "depth":
                atol = 1e-10 * float(np.max(np.abs(arr)) + 1.0)
            checks.append(_lower(f"{label}_b{k}", arr[:, k], atol))
    arr = cat("X")
    for k in range(n_buckets):
        checks.append(_two_sided(f"inconspicuous_b{k}", arr[:, k], atol_xi))
    arr = cat("orth")
    for k in range(n_buckets):
        checks.append(_two_sided(f"orthogonality_b{k}", arr[:, k], atol_xi))
    tx = max(p["terminal_xi"] for p in parts)
    checks.append(Check("terminal_xi", tx, 0.0, 0.0, tx == 0.0, "max |xi_T - z| == 0"))
    tp = max(p["terminal_price"] for p in parts)
    checks.append(Check("terminal_price", tp, 0.0, 0.0, tp <= 1e-8, "max relative |P_T - v| <= 1e-8"))
    ident = max(p["identity"] for p in parts)
    checks.append(Check("step_identity", ident, 0.0, 0.0, ident <= 1e-10 * max(1.0, atol_xi * 1e10),
                        "max |d xi - lambda dY_hat| <= 1e-10 scale"))
    minL = min(p["min_Lambda"] for p in parts)
    checks.append(Check("Lambda_positive", minL, 0.0, 0.0, minL > 0, "min Lambda > 0 before T"))
    budget = cat("budget")
    frac = float(np.mean(np.abs(budget - 1.0) <= 0.02))
    checks.append(Check("unit_budget", frac, float(np.max(np.abs(budget - 1.0))), 1.0, frac >= 0.99,
                        "|budget - 1| <= 0.02 on >= 99% of paths"))
    secondary = cat("profit_time")
    rel = float(np.sqrt(np.mean((profit - secondary) ** 2)) / max(np.sqrt(np.mean(profit**2)), 1e-300))
    checks.append(Check("profit_crosscheck", rel, 0.0, 0.0, rel <= 0.01, "RMS relative gap <= 1%",
                        informational=True))
    for dev in deviations:
        d = cat("dev_" + dev.name)
        m, se = _mean_se(d - bound)
        checks.append(Check(f"deviation_{dev.name}_bound", float(np.mean(d)), se, float(np.mean(bound)),
                            bool(m <= 3 * se), "mean(dev - bound) <= 3 SE"))
        if not (isinstance(dev, Scaled) and dev.c in (0.0, 1.0)) and not isinstance(dev, DelayedStart):
            m, se = _mean_se(profit - d)
            checks.append(Check(f"deviation_{dev.name}_strict", m, se, 0.0, bool(m >= 3 * se),
                                "mean(equilibrium - dev) >= 3 SE"))
        if isinstance(dev, Scaled) and dev.c == 0.0:
            m, se = _mean_se(d)
            checks.append(Check(f"deviation_{dev.name}_zero", m, se, 0.0, bool(abs(m) <= 3 * se + 1e-300),
                                "|mean| <= 3 SE"))

    meta = {"grid_n": g.n, "refinement": g.refinement, "backend": getattr(solver, "method", "?"),
            "n_buckets": n_buckets, "batch_size": batch_size,
            "solver_diagnostics": _jsonable(getattr(solver, "diagnostics", {}))}
    if conditional:
        checks.extend(_conditional_checks(scn, solver, rf, n_paths, seed, batches, threads, conditional_times))
    return McReport(checks, n_paths, seed, meta)


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        out[k] = v
    return out


def _conditional_checks(scn, solver, rf, n_paths, seed, batches, threads, times):
    """Variance, skewness and kurtosis of ``xi_T - xi_t`` with one frozen ``W`` path."""
    g = scn.grid
    cols = [g.index_of(t * g.T) for t in times]

    def work(idx):
        _, filt, _, _, xi, _ = _state_batch(scn, solver, idx, seed, "bridge", True, 1)
        D = np.column_stack([xi[:, -1] - xi[:, c] for c in cols])
        sub = cols + [g.n]
        P = rf.R_xi(np.clip(filt.Sigma[:, sub], 0.0, 1.0), xi[:, sub])
        with np.errstate(divide="ignore", invalid="ignore"):
            LR = np.log(P[:, -1:] / P[:, :-1])
        return {"D": D, "LR": LR, "Sigma": filt.Sigma[0, cols]}

    parts = _run_batches(work, batches, threads)
    D = np.vstack([p["D"] for p in parts])
    LR = np.vstack([p["LR"] for p in parts])
    Sig = parts[0]["Sigma"]
    N = D.shape[0]
    checks = []
    for j, t in enumerate(times):
        d = D[:, j]
        dev2 = (d - d.mean()) ** 2
        var, se = _mean_se(dev2)
        var *= N / (N - 1)
        checks.append(Check(f"conditional_variance_t{t:g}", var, se, float(Sig[j]),
                            bool(abs(var - Sig[j]) <= 3 * se), "|var - Sigma_t| <= 3 SE"))
        s = (d - d.mean()) / d.std()
        skew = float(np.mean(s**3))
        kurt = float(np.mean(s**4) - 3.0)
        se_s, se_k = math.sqrt(6.0 / N), math.sqrt(24.0 / N)
        checks.append(Check(f"conditional_skew_t{t:g}", skew, se_s, 0.0, abs(skew) <= 3 * se_s, "|skew| <= 3 SE"))
        checks.append(Check(f"conditional_kurtosis_t{t:g}", kurt, se_k, 0.0, abs(kurt) <= 3 * se_k,
                            "|excess kurtosis| <= 3 SE"))
        if isinstance(scn.dist, Lognormal):
            lr = LR[:, j]
            s2 = scn.dist.sigma**2 * Sig[j]
            m, se = _mean_se(lr)
            checks.append(Check(f"lognormal_logreturn_mean_t{t:g}", m, se, -0.5 * s2,
                                bool(abs(m + 0.5 * s2) <= 3 * se), "|mean + s^2 Sigma/2| <= 3 SE"))
            v2, se2 = _mean_se((lr - lr.mean()) ** 2)
            v2 *= N / (N - 1)
            checks.append(Check(f"lognormal_logreturn_var_t{t:g}", v2, se2, s2, bool(abs(v2 - s2) <= 3 * se2),
                                "|var - s^2 Sigma| <= 3 SE"))
    return checks
