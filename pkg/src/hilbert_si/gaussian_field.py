"""Trace-class Gaussian noise N(0, C) on the sensor grid.

The RBF kernel is ``k(x, y) = exp(-|x - y|^2 / (2 l))``; the length scale
``l`` enters linearly, not squared.  Sampling is ``L @ xi`` where ``L`` is a
Cholesky factor of the Gram matrix (plus the smallest jitter that makes the
factorisation succeed) and ``xi`` comes from ``numpy.random.Generator``
(PCG64 bit generator, ziggurat normals).  Independent streams are derived
with ``SeedSequence.spawn`` so that parallel callers never share state.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .function_space import Grid, GridFunction, GridMismatchError

log = logging.getLogger(__name__)

JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8, 1e-6)


class FactorizationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RbfKernel:
    length_scale: float

    def __post_init__(self):
        if not self.length_scale > 0:
            raise ValueError(f"length_scale must be positive, got {self.length_scale}")

    def __call__(self, x, y):
        d = np.subtract.outer(np.asarray(x, float), np.asarray(y, float))
        return np.exp(-(d * d) / (2.0 * self.length_scale))


@dataclass(frozen=True)
class GaussianField:
    grid: Grid
    kernel: RbfKernel
    gram: np.ndarray = field(repr=False)
    factor: np.ndarray = field(repr=False)
    jitter: float

    @property
    def n_points(self) -> int:
        return self.grid.n_points

    def trace(self) -> float:
        """Discrete trace ``(1/n) sum K_ii`` of the covariance operator."""
        return float(np.mean(np.diag(self.gram)))


def cholesky_with_jitter(mat: np.ndarray, ladder=JITTER_LADDER):
    """Return ``(L, jitter)`` for the first jitter on the ladder that works."""
    eye = np.eye(mat.shape[0])
    for jitter in ladder:
        try:
            return np.linalg.cholesky(mat + jitter * eye), jitter
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(f"Cholesky failed up to jitter {ladder[-1]:g}")


def build_field(kernel: RbfKernel, grid: Grid) -> GaussianField:
    s = grid.points
    gram = kernel(s, s)
    try:
        factor, jitter = cholesky_with_jitter(gram)
    except FactorizationError as exc:
        raise FactorizationError(
            f"RBF Gram not factorisable (length_scale={kernel.length_scale}, "
            f"n={grid.n_points})") from exc
    if jitter:
        log.info("RBF Gram (l=%g, n=%d) needed jitter %g",
                 kernel.length_scale, grid.n_points, jitter)
    gram.setflags(write=False)
    factor.setflags(write=False)
    return GaussianField(grid, kernel, gram, factor, jitter)


def sample(fld: GaussianField, rng: np.random.Generator) -> GridFunction:
    xi = rng.standard_normal(fld.n_points)
    return GridFunction(fld.grid, fld.factor @ xi)


def sample_batch(fld: GaussianField, rng: np.random.Generator, size) -> np.ndarray:
    """Draw independent samples; returns shape ``(*size, n_points)``.

    Row ``i`` uses the same normals as the ``i``-th call of :func:`sample`
    on the same generator.
    """
    size = (size,) if np.isscalar(size) else tuple(size)
    xi = rng.standard_normal(size + (fld.n_points,))
    return xi @ fld.factor.T


def apply_covariance(fld: GaussianField, f: GridFunction) -> GridFunction:
    if f.grid != fld.grid:
        raise GridMismatchError("function and field live on different grids")
    return GridFunction(fld.grid, fld.gram @ f.values / fld.n_points)


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` statistically independent generators derived from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
