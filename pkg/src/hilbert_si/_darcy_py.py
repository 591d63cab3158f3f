"""Pure-numpy twin of the compiled Darcy kernel in ``_darcy_core``.

Residual evaluation is vectorised over the grid; the Thomas sweep is a plain
Python loop.  Used when the extension is not built or when
``HSI_PURE_PYTHON=1`` is set.
"""
from __future__ import annotations

import numpy as np


def _residual(psi, u, h):
    m = 0.5 * (psi[1:] + psi[:-1])
    flux = (0.2 + m * m) * (psi[1:] - psi[:-1]) / h
    res = np.zeros_like(psi)
    res[1:-1] = -(flux[1:] - flux[:-1]) / h - u[1:-1]
    return res


def _thomas(lo, di, up, rhs):
    """Solve a tridiagonal system; inputs are copied."""
    di = di.copy()
    rhs = rhs.copy()
    n = len(di)
    for j in range(1, n):
        w = lo[j] / di[j - 1]
        di[j] = di[j] - w * up[j - 1]
        rhs[j] = rhs[j] - w * rhs[j - 1]
    rhs[n - 1] = rhs[n - 1] / di[n - 1]
    for j in range(n - 2, -1, -1):
        rhs[j] = (rhs[j] - up[j] * rhs[j + 1]) / di[j]
    return rhs


def solve_one(u, tol=1e-10, max_iter=50, max_halvings=30, armijo=1e-4):
    u = np.asarray(u, float)
    n = len(u)
    h = 1.0 / (n - 1)
    psi = np.zeros(n)
    res = _residual(psi, u, h)
    f0 = float(np.sum(res * res))
    iters = 0
    for it in range(max_iter + 1):
        r = float(np.max(np.abs(res[1:-1])))
        if not np.isfinite(r):
            return psi, iters, np.inf, 3
        if r < tol:
            return psi, iters, r, 0
        if it == max_iter:
            return psi, iters, r, 1
        iters = it + 1
        m = 0.5 * (psi[1:] + psi[:-1])
        a = 0.2 + m * m
        dl = psi[1:] - psi[:-1]
        dfp = (m * dl + a) / h
        dfm = (m * dl - a) / h
        lo = dfm[:-1] / h
        di = -(dfm[1:] - dfp[:-1]) / h
        up = -dfp[1:] / h
        step = _thomas(lo, di, up, -res[1:-1])
        lam = 1.0
        for _ in range(max_halvings + 1):
            trial = psi.copy()
            trial[1:-1] = psi[1:-1] + lam * step
            res_t = _residual(trial, u, h)
            f1 = float(np.sum(res_t * res_t))
            if f1 <= (1.0 - 2.0 * armijo * lam) * f0:
                break
            lam = 0.5 * lam
        else:
            return psi, iters, r, 2
        psi, res, f0 = trial, res_t, f1
    return psi, iters, r, 1


def solve_batch(u, tol=1e-10, max_iter=50, max_halvings=30, armijo=1e-4):
    u = np.asarray(u, float)
    if u.shape[1] < 3:
        raise ValueError("need at least 3 grid points")
    out = [solve_one(row, tol, max_iter, max_halvings, armijo) for row in u]
    psi = np.array([o[0] for o in out]).reshape(u.shape)
    iters = np.array([o[1] for o in out], dtype=np.int64)
    resid = np.array([o[2] for o in out])
    status = np.array([o[3] for o in out], dtype=np.int64)
    return psi, iters, resid, status
