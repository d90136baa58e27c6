"""Market parameters, time grids, reproducible noise and path containers."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

# Random-stream channels. Each (seed, channel, path) triple owns an
# independent counter-based stream, so draws never depend on batching.
CH_W = 0  # volatility driver
CH_B = 1  # noise-trading driver orthogonal to W
CH_VALUE = 2  # standardized fundamental value z
CH_REGRESSION = 3  # regression paths for the backward solver


@dataclass(frozen=True)
class MarketParams:
    """Horizon ``T`` and correlation ``rho`` between noise trading and volatility."""

    T: float = 1.0
    rho: float = 0.0

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"horizon T must be positive and finite, got {self.T}")
        if not (-1.0 < self.rho < 1.0):
            raise ValueError(f"correlation rho must lie in (-1, 1), got {self.rho}")

    @property
    def rho_hat(self) -> float:
        return math.sqrt(1.0 - self.rho * self.rho)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing nodes ``0 = t_0 < ... < t_n = T``."""

    nodes: np.ndarray
    refinement: str = "uniform"
    factor: float | None = None

    def __post_init__(self):
        t = np.array(self.nodes, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a time grid needs at least two nodes")
        if t[0] != 0.0:
            raise ValueError("grid must start at 0")
        if not np.all(np.diff(t) > 0):
            raise ValueError("grid nodes must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "nodes", t)

    @property
    def n(self) -> int:
        return self.nodes.size - 1

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def tau(self) -> np.ndarray:
        """Time to maturity at each node, exactly zero at the last one."""
        tau = self.T - self.nodes
        tau[-1] = 0.0
        return tau

    def index_of(self, t: float) -> int:
        """Index of the node closest to ``t``."""
        return int(np.argmin(np.abs(self.nodes - t)))

    def trapezoid_weights(self) -> np.ndarray:
        dt = self.dt
        w = np.zeros(self.n + 1)
        w[:-1] += 0.5 * dt
        w[1:] += 0.5 * dt
        return w


def make_grid(n: int, T: float = 1.0, refinement: str = "uniform", factor: float = 0.5) -> TimeGrid:
    """Build an ``n``-step grid on ``[0, T]``.

    ``refinement="geometric"`` splits the remaining time into blocks
    ``[T q^k, T q^(k+1)]`` (the last block runs to 0), with uniform spacing
    inside each block. The number of blocks is
    ``min(n, ceil(ln n / ln(1/q)))``. Steps are shared evenly except that the
    final block gets ``q / (1 - q)`` times the common count when ``q > 1/2``,
    and any rounding defect is repaired by moving single steps between
    neighbouring blocks, so the step size is non-increasing in time.
    """
    if int(n) != n or n < 2:
        raise ValueError(f"number of steps must be an integer >= 2, got {n}")
    n = int(n)
    if not (T > 0 and math.isfinite(T)):
        raise ValueError(f"horizon must be positive, got {T}")
    if refinement == "uniform":
        t = np.linspace(0.0, T, n + 1)
        return TimeGrid(t, "uniform", None)
    if refinement != "geometric":
        raise ValueError(f"unknown refinement {refinement!r}")
    q = float(factor)
    if not (0.0 < q < 1.0):
        raise ValueError(f"geometric factor must lie in (0, 1), got {factor}")
    counts = _block_counts(n, q)
    blocks = len(counts)
    remaining = [T * q**k for k in range(blocks)] + [0.0]
    pieces = []
    for k, m in enumerate(counts):
        a, b = T - remaining[k], T - remaining[k + 1]
        pieces.append(np.linspace(a, b, m + 1)[:-1])
    t = np.concatenate(pieces + [np.array([T])])
    t[0] = 0.0
    return TimeGrid(t, "geometric", q)


def _block_counts(n: int, q: float) -> list:
    """Steps per geometric block, with non-increasing step size across blocks.

    Starts from ``min(n, ceil(ln n / ln(1/q)))`` blocks and drops blocks until
    an allocation with non-increasing block step sizes exists; one block is
    the uniform grid.
    """
    for blocks in range(min(n, max(1, math.ceil(math.log(n) / math.log(1.0 / q)))), 0, -1):
        counts = _allocate(n, q, blocks)
        if counts is not None:
            return counts
    return [n]


def _allocate(n: int, q: float, blocks: int):
    if blocks == 1:
        return [n]
    lengths = np.array([q**k * (1.0 - q) for k in range(blocks - 1)] + [q ** (blocks - 1)])
    weights = np.ones(blocks)
    weights[-1] = max(1.0, q / (1.0 - q))
    raw = n * weights / weights.sum()
    counts = np.maximum(np.floor(raw).astype(int), 1)
    if counts.sum() > n:
        return None
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    j = 0
    while counts.sum() < n:
        counts[order[j % blocks]] += 1
        j += 1
    for _ in range(10 * n):
        step = lengths / counts
        bad = np.nonzero(step[1:] > step[:-1] * (1 + 1e-12))[0]
        if bad.size == 0:
            return [int(c) for c in counts]
        k = int(bad[0])
        if counts[k] == 1:
            return None
        counts[k] -= 1
        counts[k + 1] += 1
    return None


def stream(seed: int, channel: int, path: int) -> np.random.Generator:
    """Independent generator for one (seed, channel, path) triple."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(channel), int(path)))
    return np.random.Generator(np.random.Philox(ss))


def standard_normals(
    seed: int, channel: int, paths, size: int, threads: int = 1
) -> np.ndarray:
    """Rows of ``size`` standard normals, one row per path index in ``paths``.

    The output is a pure function of ``(seed, channel, path)``; thread count
    and batching only change how the rows are produced.
    """
    paths = np.asarray(paths, dtype=np.int64).ravel()
    out = np.empty((paths.size, size))

    def fill(lo, hi):
        for r in range(lo, hi):
            out[r] = stream(seed, channel, paths[r]).standard_normal(size)

    threads = max(1, int(threads))
    if threads == 1 or paths.size < 2 * threads:
        fill(0, paths.size)
    else:
        edges = np.linspace(0, paths.size, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(fill, edges[:-1], edges[1:]))
    return out


def brownian_increments(
    grid: TimeGrid, seed: int, channel: int, paths, threads: int = 1
) -> np.ndarray:
    """Brownian increments on ``grid`` for each path index, shape ``(P, n)``."""
    eps = standard_normals(seed, channel, paths, grid.n, threads)
    return eps * np.sqrt(grid.dt)


@dataclass(frozen=True, eq=False)
class PathSet:
    """Named path arrays aligned to a grid, each of shape ``(n_paths, n + 1)``.

    ``seed`` records the master seed the channels were drawn from.
    """

    grid: TimeGrid
    values: Mapping[str, np.ndarray] = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        frozen = {}
        counts = set()
        for name, arr in self.values.items():
            a = np.array(arr, dtype=float)
            if a.ndim != 2 or a.shape[1] != self.grid.n + 1:
                raise ValueError(f"path array {name!r} has shape {a.shape}, expected (P, {self.grid.n + 1})")
            a.setflags(write=False)
            frozen[name] = a
            counts.add(a.shape[0])
        if len(counts) > 1:
            raise ValueError(f"channels disagree on the path count: {sorted(counts)}")
        if counts and counts.pop() < 1:
            raise ValueError("a path set needs at least one path")
        object.__setattr__(self, "values", frozen)

    @property
    def labels(self) -> tuple:
        return tuple(self.values)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    @property
    def n_paths(self) -> int:
        return next(iter(self.values.values())).shape[0] if self.values else 0

    def increments(self, name: str) -> np.ndarray:
        return np.diff(self.values[name], axis=1)


def cumulative(increments: np.ndarray) -> np.ndarray:
    """Prepend a zero column and cumulate along time."""
    inc = np.asarray(increments, dtype=float)
    out = np.zeros((inc.shape[0], inc.shape[1] + 1))
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out


def correlated_brownian(
    grid: TimeGrid,
    params: MarketParams,
    n_paths: int,
    seed: int,
    first_path: int = 0,
    threads: int = 1,
) -> PathSet:
    """Independent Brownian motions ``W`` and ``B`` on ``grid``.

    The correlation with noise trading enters only through
    ``dZ = sigma (rho dW + rho_hat dB)``; see :func:`noise_increments`.
    """
    idx = np.arange(first_path, first_path + n_paths)
    dW = brownian_increments(grid, seed, CH_W, idx, threads)
    dB = brownian_increments(grid, seed, CH_B, idx, threads)
    return PathSet(grid, {"W": cumulative(dW), "B": cumulative(dB)}, seed=int(seed))


def noise_increments(sigma: np.ndarray, dW: np.ndarray, dB: np.ndarray, params: MarketParams) -> np.ndarray:
    """Left-point increments of the noise-trader flow ``dZ = sigma dBbar``."""
    return sigma[:, :-1] * (params.rho * dW + params.rho_hat * dB)
