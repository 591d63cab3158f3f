# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled damped-Newton solver for -(a(psi) psi')' = u, a = 0.2 + psi^2.

Mirrors ``_darcy_py`` operation by operation so both back ends agree to
rounding.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, isfinite, INFINITY

cnp.import_array()


cdef double _residual(const double[:] psi, const double[:] u, double h,
                      double[:] res) noexcept nogil:
    """Fill interior residuals, return sum of squares."""
    cdef Py_ssize_t n = psi.shape[0]
    cdef Py_ssize_t j
    cdef double ml, mr, fl, fr, acc = 0.0
    ml = 0.5 * (psi[1] + psi[0])
    fl = (0.2 + ml * ml) * (psi[1] - psi[0]) / h
    for j in range(1, n - 1):
        mr = 0.5 * (psi[j + 1] + psi[j])
        fr = (0.2 + mr * mr) * (psi[j + 1] - psi[j]) / h
        res[j] = -(fr - fl) / h - u[j]
        acc += res[j] * res[j]
        fl = fr
    return acc


cdef double _maxabs(const double[:] res) noexcept nogil:
    cdef Py_ssize_t j, n = res.shape[0]
    cdef double m = 0.0
    for j in range(1, n - 1):
        if not isfinite(res[j]):
            return INFINITY
        if fabs(res[j]) > m:
            m = fabs(res[j])
    return m


cdef int _solve_one(const double[:] u, double[:] psi, double tol, int max_iter,
                    int max_halvings, double armijo, double[:] res, double[:] trial,
                    double[:] lo, double[:] di, double[:] up, double[:] rhs,
                    double[:] dfp, double[:] dfm, int* iters, double* final) noexcept nogil:
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t j, k
    cdef double h = 1.0 / (n - 1)
    cdef double f0, f1, lam, m, a, dl, w, r
    cdef int it, status = 1, accepted
    for j in range(n):
        psi[j] = 0.0
    f0 = _residual(psi, u, h, res)
    iters[0] = 0
    for it in range(max_iter + 1):
        r = _maxabs(res)
        final[0] = r
        if not isfinite(r):
            return 3
        if r < tol:
            return 0
        if it == max_iter:
            break
        iters[0] = it + 1
        for k in range(n - 1):
            m = 0.5 * (psi[k + 1] + psi[k])
            a = 0.2 + m * m
            dl = psi[k + 1] - psi[k]
            dfp[k] = (m * dl + a) / h
            dfm[k] = (m * dl - a) / h
        for j in range(1, n - 1):
            lo[j] = dfm[j - 1] / h
            di[j] = -(dfm[j] - dfp[j - 1]) / h
            up[j] = -dfp[j] / h
            rhs[j] = -res[j]
        # Thomas sweep on rows 1..n-2
        for j in range(2, n - 1):
            w = lo[j] / di[j - 1]
            di[j] = di[j] - w * up[j - 1]
            rhs[j] = rhs[j] - w * rhs[j - 1]
        rhs[n - 2] = rhs[n - 2] / di[n - 2]
        for j in range(n - 3, 0, -1):
            rhs[j] = (rhs[j] - up[j] * rhs[j + 1]) / di[j]
        lam = 1.0
        accepted = 0
        for k in range(max_halvings + 1):
            trial[0] = 0.0
            trial[n - 1] = 0.0
            for j in range(1, n - 1):
                trial[j] = psi[j] + lam * rhs[j]
            f1 = _residual(trial, u, h, dfp)
            if f1 <= (1.0 - 2.0 * armijo * lam) * f0:
                accepted = 1
                break
            lam = 0.5 * lam
        if not accepted:
            return 2
        for j in range(n):
            psi[j] = trial[j]
        for j in range(1, n - 1):
            res[j] = dfp[j]
        f0 = f1
    return status


def solve_batch(const double[:, :] u, double tol=1e-10, int max_iter=50,
                int max_halvings=30, double armijo=1e-4):
    """Solve every row of ``u``.  Returns ``(psi, iterations, residual, status)``
    with status 0 converged, 1 iteration cap, 2 line search, 3 non-finite."""
    cdef Py_ssize_t n_s = u.shape[0], n = u.shape[1]
    if n < 3:
        raise ValueError("need at least 3 grid points")
    psi_arr = np.zeros((n_s, n))
    iters_arr = np.zeros(n_s, dtype=np.int64)
    resid_arr = np.zeros(n_s)
    status_arr = np.zeros(n_s, dtype=np.int64)
    cdef double[:, :] psi = psi_arr
    cdef cnp.int64_t[:] iters_v = iters_arr
    cdef double[:] resid_v = resid_arr
    cdef cnp.int64_t[:] status_v = status_arr
    work = np.zeros((8, n))
    cdef double[:, :] wk = work
    cdef Py_ssize_t i
    cdef int it
    cdef double fin
    with nogil:
        for i in range(n_s):
            status_v[i] = _solve_one(u[i], psi[i], tol, max_iter, max_halvings, armijo,
                                     wk[0], wk[1], wk[2], wk[3], wk[4], wk[5], wk[6],
                                     wk[7], &it, &fin)
            iters_v[i] = it
            resid_v[i] = fin
    return psi_arr, iters_arr, resid_arr, status_arr
