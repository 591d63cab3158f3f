"""Paired data for the 1D nonlinear Darcy problem.

    -(d/dw) [(0.2 + psi(w)^2) psi'(w)] = u(w),   psi(0) = psi(1) = 0

The forcing ``u`` is a Gaussian-process draw (RBF kernel, length scale
0.05 in the linear convention of :mod:`gaussian_field`).  The equation is
discretised with fluxes at half nodes, ``a_{j+1/2} = 0.2 + ((psi_j +
psi_{j+1}) / 2)^2``, and solved by damped Newton with an Armijo line search.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .function_space import Dataset, Grid, GridFunction, pooled_stats
from .gaussian_field import RbfKernel, build_field, sample, sample_batch

log = logging.getLogger(__name__)

FORCING_LENGTH_SCALE = 0.05
TOL = 1e-10
MAX_ITER = 50
MAX_HALVINGS = 30
MAX_RESAMPLE_RATE = 0.01

_STATUS = {1: "iteration cap reached", 2: "line search failed", 3: "non-finite residual"}


class DarcySolveError(ArithmeticError):
    def __init__(self, msg, iterations, residual):
        super().__init__(msg)
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class DarcyProblem:
    grid: Grid
    forcing: GridFunction
    solution: GridFunction
    iterations: int
    residual: float


def forcing_field(grid: Grid, length_scale: float = FORCING_LENGTH_SCALE):
    return build_field(RbfKernel(length_scale), grid)


def sample_forcing(fld, rng: np.random.Generator) -> GridFunction:
    return sample(fld, rng)


def discrete_residual(psi, u) -> np.ndarray:
    """Interior residual of the discrete equation (zeros at the two ends)."""
    psi = np.asarray(psi, float)
    u = np.asarray(u, float)
    h = 1.0 / (len(psi) - 1)
    m = 0.5 * (psi[1:] + psi[:-1])
    flux = (0.2 + m * m) * (psi[1:] - psi[:-1]) / h
    res = np.zeros_like(psi)
    res[1:-1] = -(flux[1:] - flux[:-1]) / h - u[1:-1]
    return res


def solve_batch(u, tol=TOL, max_iter=MAX_ITER):
    """Solve every row of ``u``; returns ``(psi, iterations, residual, status)``."""
    u = np.ascontiguousarray(u, dtype=np.float64)
    return _kernels.darcy_solve_batch(u, tol, max_iter, MAX_HALVINGS, 1e-4)


def solve_problem(u: GridFunction) -> DarcyProblem:
    psi, it, res, status = solve_batch(u.values[None, :])
    if status[0] != 0:
        raise DarcySolveError(
            f"Newton failed ({_STATUS[int(status[0])]}) after {it[0]} iterations, "
            f"max|R| = {res[0]:.3e}", int(it[0]), float(res[0]))
    return DarcyProblem(u.grid, u, GridFunction(u.grid, psi[0]), int(it[0]), float(res[0]))


def solve_darcy(u: GridFunction) -> GridFunction:
    return solve_problem(u).solution


def manufactured(grid: Grid, amplitude: float = 0.1):
    """``(psi*, u*)`` for ``psi* = amplitude sin(pi w)``."""
    w = grid.points
    p = amplitude * np.sin(np.pi * w)
    dp = amplitude * np.pi * np.cos(np.pi * w)
    ddp = -amplitude * np.pi ** 2 * np.sin(np.pi * w)
    u = -(2.0 * p * dp * dp + (0.2 + p * p) * ddp)
    return p, u


def generate_pairs(n_samples: int, grid: Grid, seed: int,
                   length_scale: float = FORCING_LENGTH_SCALE):
    """Raw ``(u, psi)`` arrays plus the number of resampled forcings."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    fld = forcing_field(grid, length_scale)
    rng = np.random.default_rng(seed)
    u = sample_batch(fld, rng, n_samples)
    psi, _, _, status = solve_batch(u)
    budget = math.floor(MAX_RESAMPLE_RATE * n_samples)
    resampled = 0
    bad = np.flatnonzero(status != 0)
    while bad.size:
        resampled += bad.size
        if resampled > budget:
            raise DarcySolveError(
                f"{resampled} of {n_samples} forcings failed to solve; "
                "more than 1% indicates a solver or configuration problem",
                -1, math.nan)
        u[bad] = sample_batch(fld, rng, bad.size)
        psi[bad], _, _, st = solve_batch(u[bad])
        bad = bad[st != 0]
    log.info("darcy: %d samples, %d resampled, backend %s",
             n_samples, resampled, _kernels.BACKEND)
    return u, psi, resampled


def generate_dataset(n_samples: int, grid: Grid, seed: int,
                     length_scale: float = FORCING_LENGTH_SCALE) -> Dataset:
    """Normalised dataset with channels ``[u, psi]``; each channel is
    standardised by its own pooled scalar mean and std."""
    u, psi, resampled = generate_pairs(n_samples, grid, seed, length_scale)
    raw = np.stack([u, psi], axis=1)
    means, stds = [], []
    for c in range(2):
        m, s = pooled_stats(raw[:, c])
        means.append(m)
        stds.append(s)
    vals = (raw - np.asarray(means)[None, :, None]) / np.asarray(stds)[None, :, None]
    extra = {"seed": seed, "length_scale": repr(float(length_scale)),
             "resampled": resampled, "channels": "u,psi"}
    return Dataset(vals, means, stds, extra)
