# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled change-point kernels (see ``_fallback`` for the reference)."""
import numpy as np

from libc.math cimport exp, log, sqrt, INFINITY, isfinite


cdef double _fill_terms(const double[::1] log_g, const double[::1] log_f,
                        double log_rho, double log1m_rho, double[::1] t) nogil:
    cdef Py_ssize_t n = log_g.shape[0], k
    cdef double total_f = 0.0, pre = 0.0, post_before = 0.0
    cdef double lp = log_rho, top = -INFINITY
    for k in range(n):
        total_f += log_f[k]
    for k in range(n):
        if k > 0:
            lp += log1m_rho
            pre += log_g[k - 1]
            post_before += log_f[k - 1]
        t[k] = lp + pre + (total_f - post_before)
        if t[k] > top:
            top = t[k]
    return top


def changepoint_terms(log_g, log_f, double log_rho, double log1m_rho):
    cdef const double[::1] g = np.ascontiguousarray(log_g, dtype=np.float64)
    cdef const double[::1] f = np.ascontiguousarray(log_f, dtype=np.float64)
    cdef Py_ssize_t n = g.shape[0], k
    if f.shape[0] != n:
        raise ValueError("log_g and log_f must have equal length")
    if n == 0:
        raise ValueError("empty window")
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] t = out
    cdef double top, s = 0.0, acc = 0.0
    with nogil:
        top = _fill_terms(g, f, log_rho, log1m_rho, t)
    if not isfinite(top):
        out[:] = 0.0
        return top, out
    with nogil:
        for k in range(n):
            t[k] = exp(t[k] - top)
            s += t[k]
        for k in range(n):
            acc += t[k]
            t[k] = acc / s
    return top + log(s), out


def log_posterior_ratio(log_g, log_f, double log_rho, double log1m_rho):
    cdef const double[::1] g = np.ascontiguousarray(log_g, dtype=np.float64)
    cdef const double[::1] f = np.ascontiguousarray(log_f, dtype=np.float64)
    cdef Py_ssize_t n = g.shape[0], k
    if f.shape[0] != n:
        raise ValueError("log_g and log_f must have equal length")
    if n == 0:
        raise ValueError("empty window")
    cdef double[::1] t = np.empty(n, dtype=np.float64)
    cdef double top, s = 0.0, num, sum_g = 0.0
    with nogil:
        top = _fill_terms(g, f, log_rho, log1m_rho, t)
        if isfinite(top):
            for k in range(n):
                s += exp(t[k] - top)
            num = top + log(s)
        else:
            num = top
        for k in range(n):
            sum_g += g[k]
    return num - (n * log1m_rho + sum_g)


cdef double _LOG_2PI = 1.8378770664093453


def window_objective(x, log_g, mu, sigma, double log_rho, double log1m_rho, int want=3):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] gv = np.ascontiguousarray(log_g, dtype=np.float64)
    cdef const double[::1] muv = np.ascontiguousarray(mu, dtype=np.float64)
    cdef const double[:, ::1] sv = np.ascontiguousarray(sigma, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], m = xv.shape[1], i, j, k, t
    if gv.shape[0] != n or muv.shape[0] != m or sv.shape[0] != m or sv.shape[1] != m:
        raise ValueError("shape mismatch in window_objective")
    if n == 0:
        raise ValueError("empty window")

    cdef double[:, ::1] L = np.zeros((m, m))
    cdef double[:, ::1] r = np.empty((n, m))
    cdef double[::1] z = np.empty(m)
    cdef double[::1] log_f = np.empty(n)
    cdef double[::1] c = np.empty(n)
    cdef double s, logdet = 0.0, top, tot = 0.0, acc = 0.0, csum
    cdef bint ok = True

    with nogil:
        for j in range(m):
            s = sv[j, j]
            for k in range(j):
                s -= L[j, k] * L[j, k]
            if not s > 0.0:
                ok = False
                break
            L[j, j] = sqrt(s)
            logdet += log(L[j, j])
            for i in range(j + 1, m):
                s = sv[i, j]
                for k in range(j):
                    s -= L[i, k] * L[j, k]
                L[i, j] = s / L[j, j]
    if not ok:
        raise np.linalg.LinAlgError("covariance is not positive definite")

    with nogil:
        logdet *= 2.0
        for t in range(n):
            s = 0.0
            for i in range(m):
                r[t, i] = xv[t, i] - muv[i]
                acc = r[t, i]
                for k in range(i):
                    acc -= L[i, k] * z[k]
                z[i] = acc / L[i, i]
                s += z[i] * z[i]
            log_f[t] = -0.5 * (s + logdet + m * _LOG_2PI)
        top = _fill_terms(gv, log_f, log_rho, log1m_rho, c)

    if not isfinite(top):
        return top, None, None
    with nogil:
        for t in range(n):
            c[t] = exp(c[t] - top)
            tot += c[t]
        acc = 0.0
        for t in range(n):
            acc += c[t]
            c[t] = acc / tot
    lse = top + log(tot)
    if not want:
        return lse, None, None

    prec_a = np.zeros((m, m))
    cdef double[:, ::1] P = prec_a
    cdef double[:, ::1] Li = np.zeros((m, m))
    cdef double[::1] s1 = np.zeros(m)
    with nogil:
        # inverse of the Cholesky factor, then P = Li^T Li
        for j in range(m):
            Li[j, j] = 1.0 / L[j, j]
            for i in range(j + 1, m):
                acc = 0.0
                for k in range(j, i):
                    acc -= L[i, k] * Li[k, j]
                Li[i, j] = acc / L[i, i]
        for i in range(m):
            for j in range(m):
                acc = 0.0
                for k in range(i if i > j else j, m):
                    acc += Li[k, i] * Li[k, j]
                P[i, j] = acc
        csum = 0.0
        for t in range(n):
            csum += c[t]
            for i in range(m):
                s1[i] += c[t] * r[t, i]

    gmu = None
    gsig = None
    cdef double[::1] gm
    cdef double[:, ::1] S2, A, G
    if want & 1:
        gmu = np.empty(m)
        gm = gmu
        with nogil:
            for i in range(m):
                acc = 0.0
                for k in range(m):
                    acc += P[i, k] * s1[k]
                gm[i] = -acc
    if want & 2:
        S2 = np.zeros((m, m))
        A = np.empty((m, m))
        gsig = np.empty((m, m))
        G = gsig
        with nogil:
            for t in range(n):
                for i in range(m):
                    acc = c[t] * r[t, i]
                    for j in range(i + 1):
                        S2[i, j] += acc * r[t, j]
            for i in range(m):
                for j in range(i):
                    S2[j, i] = S2[i, j]
            # A = P S2, G = 0.5 csum P - 0.5 A P
            for i in range(m):
                for j in range(m):
                    acc = 0.0
                    for k in range(m):
                        acc += P[i, k] * S2[k, j]
                    A[i, j] = acc
            for i in range(m):
                for j in range(i + 1):
                    acc = 0.0
                    for k in range(m):
                        acc += A[i, k] * P[k, j]
                    G[i, j] = 0.5 * csum * P[i, j] - 0.5 * acc
                    G[j, i] = G[i, j]
    return lse, gmu, gsig
