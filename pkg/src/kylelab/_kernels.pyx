# cython: language_level=3
"""Compiled hot kernels. Semantics match ``kylelab._fallback`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, erfc, fabs, pow, floor, INFINITY, isfinite
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double SQRT1_2 = 0.7071067811865476
cdef double LOG_SQRT_2PI = 0.9189385332046727


cdef inline double _log_ndtr(double z) noexcept nogil:
    cdef double z2, s, r
    if z > 6.0:
        return log1p(-0.5 * erfc(z * SQRT1_2))
    if z > -37.0:
        return log(0.5 * erfc(-z * SQRT1_2))
    # Asymptotic Mills-ratio series; erfc underflows past this point.
    r = 1.0 / (z * z)
    s = 1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r * (1.0 - 7.0 * r * (1.0 - 9.0 * r))))
    return -0.5 * z * z - log(-z) - LOG_SQRT_2PI + log(s)


cdef inline double _lse_add(double a, double b) noexcept nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


cdef double _mix_quantile(double x, const double* mu, const double* sig, const double* logw, int K,
                          double tol, int max_iter) noexcept nogil:
    cdef double sgn = 1.0
    cdef double target, lo, hi, y, c, z, lp, lf, g, ynew
    cdef int i, it
    if x > 0:
        sgn = -1.0
    target = _log_ndtr(sgn * x)
    lo = INFINITY
    hi = -INFINITY
    for i in range(K):
        c = mu[i] + sig[i] * x
        if c < lo:
            lo = c
        if c > hi:
            hi = c
    y = 0.5 * (lo + hi)
    if hi - lo <= tol * (1.0 + fabs(y)):
        return y
    for it in range(max_iter):
        lp = -INFINITY
        lf = -INFINITY
        for i in range(K):
            z = (y - mu[i]) / sig[i]
            lp = _lse_add(lp, logw[i] + _log_ndtr(sgn * z))
            lf = _lse_add(lf, logw[i] - 0.5 * z * z - log(sig[i]))
        lf -= LOG_SQRT_2PI
        g = sgn * (lp - target)
        if g == 0:
            return y
        if g > 0:
            hi = y
        else:
            lo = y
        ynew = y - g / exp(lf - lp)
        if not (ynew > lo and ynew < hi) or not isfinite(ynew):
            ynew = 0.5 * (lo + hi)
        if fabs(ynew - y) <= tol * (1.0 + fabs(y)) or hi - lo <= tol * (1.0 + fabs(y)):
            return ynew
        y = ynew
    return y


cdef int _check_law(Py_ssize_t K, Py_ssize_t ns, Py_ssize_t nw, Py_ssize_t nt, Py_ssize_t nb) except -1:
    if ns != K or nw != K:
        raise ValueError("mixture parameter arrays must have equal length")
    if nb != nt:
        raise ValueError("table values and slopes must have equal length")
    return 0


def mixture_log_quantile(x, mu, sig, logw, double tol=1e-14, int max_iter=200):
    cdef cnp.ndarray[double, ndim=1] xf = np.ascontiguousarray(x, dtype=float).ravel()
    cdef const double[::1] m = np.ascontiguousarray(mu, dtype=float)
    cdef const double[::1] s = np.ascontiguousarray(sig, dtype=float)
    cdef const double[::1] lw = np.ascontiguousarray(logw, dtype=float)
    cdef Py_ssize_t n = xf.shape[0], j
    cdef int K = m.shape[0]
    if K == 0:
        raise ValueError("mixture needs at least one component")
    _check_law(K, s.shape[0], lw.shape[0], 0, 0)
    out = np.empty(n)
    cdef double[::1] o = out
    cdef const double[::1] xv = xf
    with nogil:
        for j in range(n):
            o[j] = _mix_quantile(xv[j], &m[0], &s[0], &lw[0], K, tol, max_iter)
    return out.reshape(np.shape(x))


cdef inline double _h(int kind, double p0, double p1, const double* mu, const double* sig, const double* logw,
                      int K, double x0, double dx, const double* ty, const double* tdy, Py_ssize_t nt,
                      double x) noexcept nogil:
    cdef double s, t, t2, t3, y
    cdef Py_ssize_t j
    if kind == 0:
        return p0 + p1 * x
    if kind == 1:
        return p0 * exp(p1 * x)
    s = (x - x0) / dx
    j = <Py_ssize_t> floor(s)
    if s >= 0 and j < nt - 1:
        t = s - j
        t2 = t * t
        t3 = t2 * t
        y = ((2 * t3 - 3 * t2 + 1) * ty[j] + (t3 - 2 * t2 + t) * dx * tdy[j]
             + (-2 * t3 + 3 * t2) * ty[j + 1] + (t3 - t2) * dx * tdy[j + 1])
        if y != y:
            # Cells flagged with NaN slopes are solved exactly.
            y = _mix_quantile(x, mu, sig, logw, K, 1e-14, 200)
    else:
        y = _mix_quantile(x, mu, sig, logw, K, 1e-14, 200)
    return exp(y)


cdef double _dummy[1]


def transport_h(int kind, double p0, double p1, mu, sig, logw, double x0, double dx, ty, tdy, x):
    cdef const double[::1] m = np.ascontiguousarray(mu, dtype=float)
    cdef const double[::1] s = np.ascontiguousarray(sig, dtype=float)
    cdef const double[::1] lw = np.ascontiguousarray(logw, dtype=float)
    cdef const double[::1] a = np.ascontiguousarray(ty, dtype=float)
    cdef const double[::1] b = np.ascontiguousarray(tdy, dtype=float)
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=float)
    cdef Py_ssize_t n = xv.shape[0], j, nt = a.shape[0]
    cdef int K = m.shape[0]
    _check_law(K, s.shape[0], lw.shape[0], nt, b.shape[0])
    cdef const double* pm = &m[0] if K > 0 else _dummy
    cdef const double* ps = &s[0] if K > 0 else _dummy
    cdef const double* pw = &lw[0] if K > 0 else _dummy
    cdef const double* pa = &a[0] if nt > 0 else _dummy
    cdef const double* pb = &b[0] if nt > 0 else _dummy
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for j in range(n):
            o[j] = _h(kind, p0, p1, pm, ps, pw, K, x0, dx, pa, pb, nt, xv[j])
    return out


def gh_moments(int kind, double p0, double p1, mu, sig, logw, double x0, double dx, ty, tdy,
               xi, su, nodes, weights):
    cdef const double[::1] m = np.ascontiguousarray(mu, dtype=float)
    cdef const double[::1] s = np.ascontiguousarray(sig, dtype=float)
    cdef const double[::1] lw = np.ascontiguousarray(logw, dtype=float)
    cdef const double[::1] a = np.ascontiguousarray(ty, dtype=float)
    cdef const double[::1] b = np.ascontiguousarray(tdy, dtype=float)
    xi = np.ascontiguousarray(xi, dtype=float).ravel()
    cdef const double[::1] xv = xi
    cdef const double[::1] sv = np.ascontiguousarray(np.broadcast_to(np.asarray(su, dtype=float), xi.shape))
    cdef const double[::1] zn = np.ascontiguousarray(nodes, dtype=float)
    cdef const double[::1] wn = np.ascontiguousarray(weights, dtype=float)
    cdef Py_ssize_t n = xv.shape[0], j, q, nq = zn.shape[0], nt = a.shape[0]
    cdef int K = m.shape[0]
    _check_law(K, s.shape[0], lw.shape[0], nt, b.shape[0])
    if wn.shape[0] != nq:
        raise ValueError("nodes and weights must have equal length")
    cdef const double* pm = &m[0] if K > 0 else _dummy
    cdef const double* ps = &s[0] if K > 0 else _dummy
    cdef const double* pw = &lw[0] if K > 0 else _dummy
    cdef const double* pa = &a[0] if nt > 0 else _dummy
    cdef const double* pb = &b[0] if nt > 0 else _dummy
    cdef double hv, acc0, acc1
    out0 = np.empty(n)
    out1 = np.empty(n)
    cdef double[::1] o0 = out0
    cdef double[::1] o1 = out1
    with nogil:
        for j in range(n):
            acc0 = 0.0
            acc1 = 0.0
            for q in range(nq):
                hv = _h(kind, p0, p1, pm, ps, pw, K, x0, dx, pa, pb, nt, xv[j] + sv[j] * zn[q])
                acc0 += wn[q] * hv
                acc1 += wn[q] * zn[q] * hv
            o0[j] = acc0
            o1[j] = acc1
    return out0, out1


def cir_euler(double v0, double a, double k, double eta, dt, dW):
    cdef const double[:, ::1] w = np.ascontiguousarray(dW, dtype=float)
    cdef const double[::1] h = np.ascontiguousarray(dt, dtype=float)
    cdef Py_ssize_t P = w.shape[0], n = w.shape[1], p, i
    cdef double vp, v
    if h.shape[0] != n:
        raise ValueError("step sizes and increments are not aligned")
    out = np.empty((P, n + 1))
    cdef double[:, ::1] V = out
    with nogil:
        for p in range(P):
            v = v0
            V[p, 0] = v
            for i in range(n):
                vp = v if v > 0 else 0.0
                v = v + (a - k * vp) * h[i] + eta * sqrt(vp) * w[p, i]
                V[p, i + 1] = v
    return out


def volterra_cir(double v0, double b0, double b1, double A1, double vbar, K1, K2, dW):
    cdef const double[:, ::1] w = np.ascontiguousarray(dW, dtype=float)
    cdef const double[:, ::1] k1 = np.ascontiguousarray(K1, dtype=float)
    cdef const double[:, ::1] k2 = np.ascontiguousarray(K2, dtype=float)
    cdef Py_ssize_t P = w.shape[0], n = w.shape[1], p, i, j
    cdef double acc, vj, vt
    if k1.shape[0] != n or k1.shape[1] != n or k2.shape[0] != n or k2.shape[1] != n:
        raise ValueError("kernel weights must be (n, n) for n steps")
    out = np.empty((P, n + 1))
    cdef double[:, ::1] V = out
    cdef double* dr = <double*> malloc(n * sizeof(double))
    cdef double* nz = <double*> malloc(n * sizeof(double))
    if dr == NULL or nz == NULL:
        free(dr)
        free(nz)
        raise MemoryError()
    try:
        with nogil:
            for p in range(P):
                V[p, 0] = v0
                for i in range(n):
                    vj = V[p, i]
                    dr[i] = b0 - b1 * vj
                    vt = vj if vj > 0 else 0.0
                    if vt > vbar:
                        vt = vbar
                    nz[i] = sqrt(A1 * vt) * w[p, i]
                    acc = v0
                    for j in range(i + 1):
                        acc += k1[i, j] * dr[j] + k2[i, j] * nz[j]
                    V[p, i + 1] = acc
    finally:
        free(dr)
        free(nz)
    return out


def holder_pairs(t, X, wts, double gamma0, double M, double gamma):
    cdef const double[::1] tv = np.ascontiguousarray(t, dtype=float)
    cdef const double[:, ::1] xv = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
    cdef const double[::1] wv = np.ascontiguousarray(wts, dtype=float)
    cdef Py_ssize_t P = xv.shape[0], n = xv.shape[1], p, i, j
    cdef double e, d, dt, r, base, m, LOG2 = log(2.0)
    if tv.shape[0] != n or wv.shape[0] != n:
        raise ValueError("times, weights and paths are not aligned")
    logF = np.empty(P)
    hnorm = np.zeros(P)
    mx_arr = np.full(P, -INFINITY)
    acc_arr = np.zeros(P)
    cdef double[::1] lf = logF
    cdef double[::1] hv = hnorm
    cdef double[::1] mx = mx_arr
    cdef double[::1] acc = acc_arr
    cdef double* lw = <double*> malloc(n * sizeof(double))
    cdef double* r0 = <double*> malloc(n * sizeof(double))
    cdef double* r1 = <double*> malloc(n * sizeof(double))
    if lw == NULL or r0 == NULL or r1 == NULL:
        free(lw)
        free(r0)
        free(r1)
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                lw[i] = log(wv[i])
            # Row by row: the kernel powers of row i are shared by every path, and
            # each path keeps an online log-sum-exp (one exp per pair).
            for i in range(n):
                for j in range(i + 1, n):
                    dt = fabs(tv[j] - tv[i])
                    r0[j] = M / pow(dt, gamma0)
                    r1[j] = 1.0 / pow(dt, gamma)
                for p in range(P):
                    e = 2 * lw[i]
                    if e > mx[p]:
                        acc[p] = acc[p] * exp(mx[p] - e) + 1.0
                        mx[p] = e
                    else:
                        acc[p] += exp(e - mx[p])
                    base = lw[i] + LOG2
                    m = mx[p]
                    for j in range(i + 1, n):
                        d = fabs(xv[p, j] - xv[p, i])
                        e = base + lw[j] + d * r0[j]
                        if e > m:
                            acc[p] = acc[p] * exp(m - e) + 1.0
                            m = e
                        else:
                            acc[p] += exp(e - m)
                        r = d * r1[j]
                        if r > hv[p]:
                            hv[p] = r
                    mx[p] = m
            for p in range(P):
                lf[p] = mx[p] + log(acc[p])
    finally:
        free(lw)
        free(r0)
        free(r1)
    return logF, hnorm
