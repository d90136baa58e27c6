"""Command-line scenario runner.

Exit codes: 0 every enabled check passed, 1 a check failed, 2 usage or
configuration error, 3 a solver failed its own diagnostics.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from kylelab import __version__
from kylelab.config import ScenarioConfig, load_config
from kylelab.core import CH_W, brownian_increments
from kylelab.equil import mc_report, simulate_equilibrium
from kylelab.filter import bsde_residual, build_solver, unit_budget
from kylelab.options import default_strikes, iv_curve
from kylelab.rfield import rfield_for
from kylelab.vol import CIRClamped, cir_mgf, holder_diagnostic, simulate_vol

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_SOLVER = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def write_json(path: Path, payload: dict):
    """Report JSON; the timestamp lives under its own top-level key."""
    doc = {"generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(), "kylelab_version": __version__,
           "result": _clean(payload)}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_csv(path: Path, header, rows):
    """CSV with ``repr`` floats, which round-trip exactly."""
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _out_dir(cfg: ScenarioConfig, args) -> Path:
    out = Path(args.out or cfg.outputs.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _apply_overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    mc = {}
    if args.seed is not None:
        mc["seed"] = args.seed
    if args.paths is not None:
        mc["n_paths"] = args.paths
    if args.threads is not None:
        mc["threads"] = args.threads
    if mc:
        data = cfg.model_dump()
        data["mc"].update(mc)
        cfg = ScenarioConfig.model_validate(data).validate_models()
    return cfg


def _solver_or_raise(scn):
    try:
        return build_solver(scn.vol, scn.market, scn.grid, scn.backend, **scn.solver_options)
    except RuntimeError as exc:
        raise SolverFailure(str(exc), getattr(exc, "diagnostics", {})) from exc


class SolverFailure(Exception):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


# --------------------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------------------


def run_simulate(cfg: ScenarioConfig, out: Path) -> int:
    scn = cfg.build_scenario()
    solver = _solver_or_raise(scn)
    mc = cfg.mc
    rep = mc_report(scn, mc.n_paths, mc.seed, threads=mc.threads, batch_size=mc.batch_size,
                    n_buckets=mc.n_buckets, conditional=mc.conditional, solver=solver)
    write_json(out / "mc_report.json", rep.to_dict())
    if cfg.outputs.per_path_csv and cfg.outputs.per_path_rows > 0:
        n = min(cfg.outputs.per_path_rows, mc.n_paths)
        b = simulate_equilibrium(scn, solver, rfield_for(scn.dist, scn.quad_order), np.arange(n), mc.seed)
        t = scn.grid.nodes
        rows = []
        for p in range(n):
            for i in range(t.size):
                rows.append([p, t[i], b.xi[p, i], b.X[p, i], b.Y[p, i], b.P[p, i], b.Lambda[p, i],
                             b.filtration.Sigma[p, i], b.filtration.lam[p, i], b.sigma[p, i], b.Pi[p, i]])
        write_csv(out / "paths.csv", ["path", "t", "xi", "X", "Y", "P", "Lambda", "Sigma", "lambda", "sigma",
                                      "profit"], rows)
    for c in rep.failed():
        print(f"FAIL {c.name}: estimate={c.estimate!r} se={c.se!r} target={c.target!r} ({c.rule})")
    print(f"{sum(c.passed for c in rep.checks)}/{len(rep.checks)} checks passed; report in {out}")
    return EXIT_OK if rep.passed else EXIT_FAIL


def run_iv_curve(cfg: ScenarioConfig, out: Path, strikes=None) -> int:
    dist = cfg.build_dist()
    iv = cfg.iv
    if strikes is None:
        strikes = iv.strikes
    if strikes is not None and len(strikes) == 0:
        raise UsageError("strike list is empty")
    summary = []
    for xi in iv.xi:
        for S in iv.Sigma:
            K = strikes if strikes is not None else default_strikes(dist, xi, S, iv.n_strikes)
            curve = iv_curve(dist, xi, S, K, order=iv.order)
            name = f"iv_xi{xi!r}_Sigma{S!r}.csv"
            write_csv(out / name, ["strike", "call_price", "total_variance"],
                      zip(curve.strikes, curve.call_prices, curve.total_variance))
            summary.append({"file": name, "xi": xi, "Sigma": S, "spot": curve.spot, "shape": curve.shape,
                            "local_minima": curve.local_minima, "flat_deviation": curve.flat_deviation})
            noun = "local minimum" if curve.local_minima == 1 else "local minima"
        print(f"xi={xi!r} Sigma={S!r}: {curve.shape} ({curve.local_minima} {noun})")
    write_json(out / "iv_curves.json", {"curves": summary})
    return EXIT_OK


def run_filter_solve(cfg: ScenarioConfig, out: Path) -> int:
    scn = cfg.build_scenario()
    solver = _solver_or_raise(scn)
    mc = cfg.mc
    paths = np.arange(mc.n_paths)
    dW = brownian_increments(scn.grid, mc.seed, CH_W, paths, mc.threads)
    vol = simulate_vol(scn.vol, scn.grid, dW)
    sol = solver.evaluate(vol)
    budget = unit_budget(sol, vol.sigma, scn.market)
    rms, mean = bsde_residual(sol, vol, scn.market)
    n_rows = min(cfg.outputs.per_path_rows, mc.n_paths)
    t = scn.grid.nodes
    rows = [[p, t[i], sol.G[p, i], sol.Sigma[p, i], sol.lam[p, i], vol.sigma[p, i]]
            for p in range(n_rows) for i in range(t.size)]
    write_csv(out / "filter_paths.csv", ["path", "t", "G", "Sigma", "lambda", "sigma"], rows)
    write_csv(out / "unit_budget.csv", ["path", "budget", "abs_error"],
              ([p, budget[p], abs(budget[p] - 1.0)] for p in range(mc.n_paths)))
    frac = float(np.mean(np.abs(budget - 1.0) <= 0.02))
    diag = dict(getattr(solver, "diagnostics", {}))
    diag.update(sol.diagnostics or {})
    bounds = diag.get("bound_violation_fraction", 0.0) or 0.0
    payload = {"method": sol.method, "budget_within_2pct": frac, "budget_max_error": float(np.max(np.abs(budget - 1))),
               "bsde_residual_rms": rms, "bsde_residual_mean": mean, "diagnostics": diag}
    write_json(out / "filter_report.json", payload)
    ok = frac >= 0.99 and bounds == 0
    print(f"{sol.method}: budget within 2% on {frac:.2%} of paths; bound-violation fraction {bounds!r}")
    return EXIT_OK if ok else EXIT_FAIL


def run_diagnostics(cfg: ScenarioConfig, out: Path) -> int:
    scn = cfg.build_scenario()
    mc = cfg.mc
    dW = brownian_increments(scn.grid, mc.seed, CH_W, np.arange(mc.n_paths), mc.threads)
    vol = simulate_vol(scn.vol, scn.grid, dW)
    checks = []
    if isinstance(scn.vol, CIRClamped) and vol.V is not None:
        v = scn.vol
        for t, u in cfg.diagnostics.mgf_probes:
            i = scn.grid.index_of(t)
            e = np.exp(u * vol.V[:, i])
            est, se = float(e.mean()), float(e.std(ddof=1) / math.sqrt(e.size))
            target = float(cir_mgf(v.a, v.k, v.eta, v.x0, scn.grid.nodes[i], u))
            checks.append({"name": f"mgf_t{t!r}_u{u!r}", "estimate": est, "se": se, "target": target,
                           "passed": bool(abs(est - target) <= 3 * se)})
    d = cfg.diagnostics
    series = vol.V if vol.V is not None else np.log(vol.sigma)
    hs = holder_diagnostic(series[: min(100, series.shape[0])], d.holder_gamma0, d.holder_M, d.holder_gamma,
                           scn.grid.nodes)
    payload = {"checks": checks, "holder": {"log_F_M_mean": float(np.mean(hs.log_F_M)),
                                            "holder_norm_mean": float(np.mean(hs.holder_norm)),
                                            "holder_norm_max": float(np.max(hs.holder_norm))}}
    write_json(out / "diagnostics.json", payload)
    for c in checks:
        print(("PASS " if c["passed"] else "FAIL ") + c["name"])
    return EXIT_OK if all(c["passed"] for c in checks) else EXIT_FAIL


# --------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kylelab", description="Insider-trading equilibrium scenario runner")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("simulate", "run the equilibrium Monte Carlo and write mc_report.json"),
                        ("iv-curve", "write implied total variance curves"),
                        ("filter-solve", "solve the filtering problem and write its diagnostics"),
                        ("diagnostics", "volatility mgf and Holder diagnostics")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="YAML or JSON scenario file")
        s.add_argument("--seed", type=int, help="override mc.seed")
        s.add_argument("--paths", type=int, help="override mc.n_paths")
        s.add_argument("--out", help="output directory (default: outputs.directory)")
        s.add_argument("--threads", type=int, help="override mc.threads")
        if name == "iv-curve":
            s.add_argument("--strikes", help="comma-separated strikes (default: 41 log-spaced)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        out = _out_dir(cfg, args)
        if args.command == "simulate":
            return run_simulate(cfg, out)
        if args.command == "iv-curve":
            strikes = None
            if args.strikes is not None:
                strikes = [float(s) for s in args.strikes.split(",") if s.strip()]
            return run_iv_curve(cfg, out, strikes)
        if args.command == "filter-solve":
            return run_filter_solve(cfg, out)
        return run_diagnostics(cfg, out)
    except (ValidationError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
