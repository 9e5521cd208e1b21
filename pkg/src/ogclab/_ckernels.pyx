# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: two-component 1-D EM and the clipped-gradient ratio sum."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, fabs, INFINITY, M_PI

cnp.import_array()


cdef double _estep(const double[::1] x, double* mu, double* var, double* w,
                   double[::1] r0, double* sums) nogil:
    """Responsibilities of component 0 into r0; returns the log-likelihood.

    Also accumulates sum(r0), sum(r0 x) and sum(x) into ``sums`` for the M-step.
    """
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double a, b, d, e, ll = 0.0, n0 = 0.0, s0 = 0.0, sx = 0.0, r
    cdef double c0 = (log(w[0]) if w[0] > 0 else -INFINITY) - 0.5 * log(2.0 * M_PI * var[0])
    cdef double c1 = (log(w[1]) if w[1] > 0 else -INFINITY) - 0.5 * log(2.0 * M_PI * var[1])
    cdef double k0 = 0.5 / var[0], k1 = 0.5 / var[1]
    for i in range(n):
        d = x[i] - mu[0]
        a = c0 - k0 * d * d
        d = x[i] - mu[1]
        b = c1 - k1 * d * d
        # two-term log-sum-exp with a single exp
        if a >= b:
            e = exp(b - a)
            r = 1.0 / (1.0 + e)
            ll += a + log1p(e)
        else:
            e = exp(a - b)
            r = e / (1.0 + e)
            ll += b + log1p(e)
        r0[i] = r
        n0 += r
        s0 += r * x[i]
        sx += x[i]
    sums[0] = n0
    sums[1] = s0
    sums[2] = sx
    return ll


cdef void _mstep(const double[::1] x, const double[::1] r0, double* mu, double* var,
                 double* w, double var_floor, const double* sums) nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double n0 = sums[0], n1 = n - sums[0], q0 = 0.0, q1 = 0.0, d
    if n0 > 0:
        mu[0] = sums[1] / n0
    if n1 > 0:
        mu[1] = (sums[2] - sums[1]) / n1
    for i in range(n):
        d = x[i] - mu[0]
        q0 += r0[i] * d * d
        d = x[i] - mu[1]
        q1 += (1.0 - r0[i]) * d * d
    if n0 > 0:
        var[0] = q0 / n0
    if n1 > 0:
        var[1] = q1 / n1
    if var[0] < var_floor:
        var[0] = var_floor
    if var[1] < var_floor:
        var[1] = var_floor
    w[0] = n0 / n
    w[1] = n1 / n


def em_fit(const double[::1] x, mu_init, var_init, w_init, int max_iters, double tol,
           double var_floor):
    """Run EM from the given start; returns (mu, var, w, loglik_trace, n_iter)."""
    cdef double mu[2]
    cdef double var[2]
    cdef double w[2]
    cdef double ll, prev = -INFINITY
    cdef double sums[3]
    cdef int it, done = 0
    cdef double[::1] r0 = np.empty(x.shape[0], dtype=np.float64)
    mu[0] = mu_init[0]; mu[1] = mu_init[1]
    var[0] = var_init[0]; var[1] = var_init[1]
    w[0] = w_init[0]; w[1] = w_init[1]
    trace = []
    for it in range(max_iters):
        ll = _estep(x, mu, var, w, r0, sums)
        trace.append(ll)
        if it > 0 and fabs(ll - prev) <= tol:
            done = 1
            break
        prev = ll
        _mstep(x, r0, mu, var, w, var_floor, sums)
    if not done:
        trace.append(_estep(x, mu, var, w, r0, sums))
    return (np.array([mu[0], mu[1]]), np.array([var[0], var[1]]),
            np.array([w[0], w[1]]), np.array(trace), len(trace))


def clipped_ratio(const double[::1] g, const double[::1] w_clean,
                  const double[::1] w_noise, double tau):
    """Ratio of the w_noise- and w_clean-weighted means of min(g, tau)."""
    cdef Py_ssize_t i, n = g.shape[0]
    cdef double c, num = 0.0, den = 0.0, mn = 0.0, mc = 0.0
    with nogil:
        for i in range(n):
            c = g[i] if g[i] < tau else tau
            num += w_noise[i] * c
            den += w_clean[i] * c
            mn += w_noise[i]
            mc += w_clean[i]
    if den <= 0 or mn <= 0:
        raise ZeroDivisionError("clean integral vanished")
    return (num / mn) / (den / mc)


def clipped_ratios(const double[::1] g, const double[::1] w_clean,
                   const double[::1] w_noise, const double[::1] taus):
    """clipped_ratio evaluated at every entry of ``taus``."""
    cdef Py_ssize_t i, j, n = g.shape[0], m = taus.shape[0]
    cdef double c, t, num, den, mn = 0.0, mc = 0.0
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        mn += w_noise[i]
        mc += w_clean[i]
    if mn <= 0 or mc <= 0:
        raise ZeroDivisionError("clean integral vanished")
    with nogil:
        for j in range(m):
            t = taus[j]
            num = 0.0
            den = 0.0
            for i in range(n):
                c = g[i] if g[i] < t else t
                num += w_noise[i] * c
                den += w_clean[i] * c
            o[j] = (num / mn) / (den / mc)
    return out
