"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature and semantics. The numpy versions are selected when the extension
is unavailable or when ``KYLELAB_PURE_PYTHON=1`` is set.
"""
import numpy as np
from scipy.special import log_ndtr, logsumexp

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

KIND_NORMAL = 0
KIND_LOGNORMAL = 1
KIND_MIXTURE = 2


def mixture_log_quantile(x, mu, sig, logw, tol=1e-14, max_iter=200):
    """Solve ``sum_i w_i Phi((y - mu_i)/sig_i) = Phi(x)`` for ``y``.

    Safeguarded Newton on the log-CDF (``x <= 0``) or the log-survival
    function (``x > 0``), which keeps full relative accuracy in both tails.
    """
    x = np.ascontiguousarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)[:, None]
    sig = np.asarray(sig, dtype=float)[:, None]
    logw = np.asarray(logw, dtype=float)[:, None]
    flat = x.ravel()
    upper = flat > 0
    sgn = np.where(upper, -1.0, 1.0)
    target = log_ndtr(sgn * flat)
    cand = mu + sig * flat
    lo = cand.min(axis=0)
    hi = cand.max(axis=0)
    y = 0.5 * (lo + hi)
    active = hi - lo > tol * (1.0 + np.abs(y))
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        ya, sa = y[idx], sgn[idx]
        z = (ya - mu) / sig
        lp = logsumexp(logw + log_ndtr(sa * z), axis=0)
        lf = logsumexp(logw - 0.5 * z * z - np.log(sig), axis=0) - _LOG_SQRT_2PI
        g = sa * (lp - target[idx])
        # g is increasing in y on both branches; move the bracket first.
        pos = g > 0
        hi[idx] = np.where(pos, ya, hi[idx])
        lo[idx] = np.where(pos, lo[idx], ya)
        step = g / np.exp(lf - lp)
        ynew = ya - step
        bad = ~((ynew > lo[idx]) & (ynew < hi[idx])) | ~np.isfinite(ynew)
        ynew = np.where(bad, 0.5 * (lo[idx] + hi[idx]), ynew)
        done = (np.abs(ynew - ya) <= tol * (1.0 + np.abs(ya))) | (
            hi[idx] - lo[idx] <= tol * (1.0 + np.abs(ya))
        ) | (g == 0)
        y[idx] = np.where(g == 0, ya, ynew)
        active[idx[done]] = False
    return y.reshape(x.shape)


def _hermite(x, x0, dx, ty, tdy):
    """Cubic Hermite interpolant of a tabulated function; NaN off-table or on flagged cells."""
    s = (x - x0) / dx
    j = np.floor(s)
    inside = (j >= 0) & (j < ty.size - 1)
    j = np.where(inside, j, 0).astype(np.intp)
    t = s - j
    t2 = t * t
    t3 = t2 * t
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + t
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    out = h00 * ty[j] + h10 * dx * tdy[j] + h01 * ty[j + 1] + h11 * dx * tdy[j + 1]
    return np.where(inside, out, np.nan)


def transport_h(kind, p0, p1, mu, sig, logw, x0, dx, ty, tdy, x):
    """Evaluate the transport map at ``x`` (1-D array)."""
    x = np.ascontiguousarray(x, dtype=float)
    if kind == KIND_NORMAL:
        return p0 + p1 * x
    if kind == KIND_LOGNORMAL:
        return p0 * np.exp(p1 * x)
    y = _hermite(x, x0, dx, ty, tdy)
    miss = np.isnan(y)
    if miss.any():
        y[miss] = mixture_log_quantile(x[miss], mu, sig, logw)
    return np.exp(y)


def gh_moments(kind, p0, p1, mu, sig, logw, x0, dx, ty, tdy, xi, su, nodes, weights):
    """Return ``sum_k w_k h(xi + su z_k)`` and ``sum_k w_k h(xi + su z_k) z_k``."""
    xi = np.ascontiguousarray(xi, dtype=float)
    su = np.broadcast_to(np.asarray(su, dtype=float), xi.shape)
    m0 = np.zeros_like(xi)
    m1 = np.zeros_like(xi)
    for zk, wk in zip(nodes, weights):
        hv = transport_h(kind, p0, p1, mu, sig, logw, x0, dx, ty, tdy, xi + su * zk)
        m0 += wk * hv
        m1 += (wk * zk) * hv
    return m0, m1


def cir_euler(v0, a, k, eta, dt, dW):
    """Full-truncation Euler for ``dV = (a - kV)dt + eta sqrt(V) dW``."""
    dW = np.asarray(dW, dtype=float)
    n_paths, n = dW.shape
    if np.shape(dt) != (n,):
        raise ValueError("step sizes and increments are not aligned")
    V = np.empty((n_paths, n + 1))
    V[:, 0] = v0
    for i in range(n):
        vp = np.maximum(V[:, i], 0.0)
        V[:, i + 1] = V[:, i] + (a - k * vp) * dt[i] + eta * np.sqrt(vp) * dW[:, i]
    return V


def volterra_cir(v0, b0, b1, A1, vbar, K1, K2, dW):
    """Volterra convolution ``V_i = V0 + sum_{j<i} K1 (b0 - b1 V_j) + K2 sqrt(A1 min(V_j+, vbar)) dW_j``.

    ``K1[i-1, j]`` and ``K2[i-1, j]`` are the weights of step ``j`` in node ``i``.
    """
    dW = np.asarray(dW, dtype=float)
    n_paths, n = dW.shape
    if np.shape(K1) != (n, n) or np.shape(K2) != (n, n):
        raise ValueError("kernel weights must be (n, n) for n steps")
    V = np.empty((n_paths, n + 1))
    V[:, 0] = v0
    drift = np.empty((n_paths, n))
    noise = np.empty((n_paths, n))
    for i in range(n):
        vj = V[:, i]
        drift[:, i] = b0 - b1 * vj
        noise[:, i] = np.sqrt(A1 * np.minimum(np.maximum(vj, 0.0), vbar)) * dW[:, i]
        V[:, i + 1] = v0 + drift[:, : i + 1] @ K1[i, : i + 1] + noise[:, : i + 1] @ K2[i, : i + 1]
    return V


def holder_pairs(t, X, wts, gamma0, M, gamma):
    """Log of the double-integral functional and the discrete Holder seminorm.

    Returns ``log sum_{i,j} w_i w_j exp(M |X_i - X_j| / |t_i - t_j|^gamma0)``
    (diagonal terms count as ``exp(0)``) and
    ``max_{i<j} |X_i - X_j| / |t_i - t_j|^gamma`` for each row of ``X``.
    """
    t = np.asarray(t, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if t.shape != (X.shape[1],) or np.shape(wts) != t.shape:
        raise ValueError("times, weights and paths are not aligned")
    dt = np.abs(t[:, None] - t[None, :])
    off = dt > 0
    safe = np.where(off, dt, 1.0)
    inv0 = np.where(off, safe**-gamma0, 0.0)
    inv1 = np.where(off, safe**-gamma, 0.0)
    logw = np.log(wts)
    lw2 = logw[:, None] + logw[None, :]
    logF = np.empty(X.shape[0])
    hn = np.empty(X.shape[0])
    for p, x in enumerate(X):
        dx = np.abs(x[:, None] - x[None, :])
        logF[p] = logsumexp(lw2 + M * dx * inv0)
        hn[p] = (dx * inv1).max()
    return logF, hn
