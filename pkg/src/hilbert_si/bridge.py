"""Stochastic interpolants, conditional-bridge drifts and a Gaussian oracle.

Batched arrays put the sensor axis last.  In heterogeneous (product space)
mode a source ``u`` becomes ``(u, 0)`` and a target ``v`` becomes ``(0, v)``,
so interpolants carry two channels.

For a jointly Gaussian coupling the drift of the conditional bridge is
available in closed form, which is what :class:`GaussianCoupling` provides;
every learned component and every solver is checked against it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

from .gaussian_field import JITTER_LADDER, FactorizationError
from .schedules import DiffusionParam, ScheduleSet, c_coeff, c_tilde


# -- interpolants -----------------------------------------------------------

def embed_pair(x0, x1):
    """Lift ``(x0, x1)`` of shape ``(..., n)`` to ``(x0, 0)`` and ``(0, x1)``."""
    x0 = np.asarray(x0, float)
    x1 = np.asarray(x1, float)
    zero = np.zeros_like(x0)
    return np.stack([x0, zero], axis=-2), np.stack([zero, x1], axis=-2)


@dataclass(frozen=True)
class InterpolantSample:
    t: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    z: np.ndarray
    x_t: np.ndarray
    velocity_target: np.ndarray = field(repr=False)


def _bcast(coef, like):
    coef = np.asarray(coef, float)
    return coef.reshape(coef.shape + (1,) * (np.ndim(like) - coef.ndim))


def sample_interpolant(s: ScheduleSet, t, x0, x1, z,
                       heterogeneous: bool = False) -> InterpolantSample:
    """``x_t = alpha(t) x0 + beta(t) x1 + gamma(t) z``.

    ``t`` is a scalar or one time per leading row.  With ``heterogeneous``
    the raw ``x0``/``x1`` are embedded into the product space first and ``z``
    must already have the two-channel shape.
    """
    if heterogeneous:
        x0, x1 = embed_pair(x0, x1)
    x0 = np.asarray(x0, float)
    x1 = np.asarray(x1, float)
    z = np.asarray(z, float)
    if not (x0.shape == x1.shape == z.shape):
        raise ValueError(f"shape mismatch: x0 {x0.shape}, x1 {x1.shape}, z {z.shape}")
    t = np.asarray(t, float)
    a, b, g = (_bcast(f(t), x0) for f in (s.alpha, s.beta, s.gamma))
    x_t = a * x0 + b * x1 + g * z
    vel = _bcast(s.alpha_dot(t), x0) * x0 + _bcast(s.beta_dot(t), x0) * x1
    return InterpolantSample(t, x0, x1, z, x_t, vel)


def reverse_interpolant(s: ScheduleSet, t, x0, x1, z):
    """``alpha(1-t) x0 + beta(1-t) x1 + gamma(1-t) z``."""
    t = np.asarray(t, float)
    return (_bcast(s.alpha(1.0 - t), x0) * x0 + _bcast(s.beta(1.0 - t), x0) * x1
            + _bcast(s.gamma(1.0 - t), x0) * z)


def assemble_drift(phi_val, eta_val, t, s: ScheduleSet, d: DiffusionParam):
    """Conditional-bridge drift ``phi + (gamma' - eps/gamma) eta``."""
    return np.asarray(phi_val) + _bcast(c_coeff(s, d, t), phi_val) * np.asarray(eta_val)


def swap_roles(pairs):
    """Swap source and target of every pair.

    Accepts a list of ``(x0, x1)`` tuples, an array shaped
    ``(n_samples, 2, n_points)`` or a :class:`~.function_space.Dataset`.
    """
    if hasattr(pairs, "swapped"):
        return pairs.swapped()
    if isinstance(pairs, np.ndarray):
        return pairs[:, ::-1].copy()
    return [(b, a) for a, b in pairs]


# -- Gaussian oracle --------------------------------------------------------

def _cho(mat):
    mat = 0.5 * (mat + mat.T)
    scale = max(float(np.max(np.abs(np.diag(mat)))), 1e-300)
    for jitter in JITTER_LADDER:
        try:
            return linalg.cho_factor(mat + jitter * scale * np.eye(len(mat)), lower=True)
        except linalg.LinAlgError:
            continue
    raise FactorizationError("symmetric solve failed at the largest jitter")


@dataclass(frozen=True)
class GaussianCoupling:
    """Zero-mean jointly Gaussian ``(x0, x1)`` in sensor coordinates.

    ``noise_gram`` is the pointwise covariance of ``z`` (the RBF Gram
    matrix), not the discretised integral operator.
    """

    sigma00: np.ndarray = field(repr=False)
    sigma01: np.ndarray = field(repr=False)
    sigma11: np.ndarray = field(repr=False)
    noise_gram: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = self.sigma00.shape[0]
        for m in (self.sigma00, self.sigma01, self.sigma11, self.noise_gram):
            if m.shape != (n, n):
                raise ValueError("all covariance blocks must be n x n")
        eig = np.linalg.eigvalsh(self.joint_cov)
        if eig[0] < -1e-8 * max(1.0, eig[-1]):
            raise ValueError(f"joint covariance is not PSD (min eigenvalue {eig[0]:.3g})")

    @classmethod
    def linear(cls, source_cov, transfer, residual_cov, noise_gram):
        """``x0 ~ N(0, S0)`` and ``x1 = M x0 + w`` with ``w ~ N(0, Sw)``."""
        s0 = np.asarray(source_cov, float)
        m = np.asarray(transfer, float)
        return cls(s0, s0 @ m.T, m @ s0 @ m.T + np.asarray(residual_cov, float),
                   np.asarray(noise_gram, float))

    def swapped(self) -> "GaussianCoupling":
        """Coupling of ``(x1, x0)``."""
        return GaussianCoupling(self.sigma11, self.sigma01.T.copy(), self.sigma00,
                                self.noise_gram)

    @property
    def n(self) -> int:
        return self.sigma00.shape[0]

    @property
    def joint_cov(self) -> np.ndarray:
        return np.block([[self.sigma00, self.sigma01], [self.sigma01.T, self.sigma11]])

    @cached_property
    def _s00(self):
        return _cho(self.sigma00)

    @cached_property
    def regression(self) -> np.ndarray:
        """``Sigma10 Sigma00^-1``: ``E[x1 | x0] = regression @ x0``."""
        return linalg.cho_solve(self._s00, self.sigma01).T

    @cached_property
    def cond_cov(self) -> np.ndarray:
        """Covariance of ``x1`` given ``x0``."""
        c = self.sigma11 - self.regression @ self.sigma01
        return 0.5 * (c + c.T)

    def cond_mean(self, x0):
        return np.asarray(x0, float) @ self.regression.T

    def sample(self, rng: np.random.Generator, size: int):
        """Draw ``(x0, x1, z)`` each of shape ``(size, n)``."""
        lj = np.linalg.cholesky(self.joint_cov + 1e-12 * np.eye(2 * self.n))
        xy = rng.standard_normal((size, 2 * self.n)) @ lj.T
        lz = np.linalg.cholesky(self.noise_gram + 1e-10 * np.eye(self.n))
        z = rng.standard_normal((size, self.n)) @ lz.T
        return xy[:, :self.n], xy[:, self.n:], z

    def sample_conditional(self, rng, x0, size):
        """Draw ``x1 | x0`` (``size`` rows)."""
        lc = np.linalg.cholesky(self.cond_cov + 1e-12 * np.eye(self.n))
        return self.cond_mean(x0) + rng.standard_normal((size, self.n)) @ lc.T

    # ``t`` must be a scalar for the methods below.

    def _gains(self, s: ScheduleSet, t: float):
        """Linear maps from the innovation ``x - alpha x0 - beta m`` to the
        posterior-mean correction and to the denoiser."""
        a, b, g = float(s.alpha(t)), float(s.beta(t)), float(s.gamma(t))
        if g == 0.0:
            return None
        cov = b * b * self.cond_cov + g * g * self.noise_gram
        fac = _cho(cov)
        # A, Sigma and K are symmetric, so Sigma A^-1 = (A^-1 Sigma)^T
        return (b * linalg.cho_solve(fac, self.cond_cov).T,
                g * linalg.cho_solve(fac, self.noise_gram).T)

    def posterior(self, s: ScheduleSet, t: float, x0, x):
        """``(E[x1 | x0, x_t = x], E[z | x0, x_t = x])`` for rows of ``x``."""
        x0 = np.asarray(x0, float)
        x = np.asarray(x, float)
        m = self.cond_mean(x0)
        if t <= 0.0:
            return np.broadcast_to(m, x.shape).copy(), np.zeros_like(x)
        if t >= 1.0:
            return x.copy(), np.zeros_like(x)
        gain_x1, gain_z = self._gains(s, t)
        innov = x - float(s.alpha(t)) * x0 - float(s.beta(t)) * m
        return m + innov @ gain_x1.T, innov @ gain_z.T

    @cached_property
    def _whitening(self):
        """``(W, W^-1, lam)`` with ``Sigma = W W^T`` and ``K = W diag(lam) W^T``,
        or None when the conditional covariance is singular."""
        try:
            lc = np.linalg.cholesky(self.cond_cov)
        except np.linalg.LinAlgError:
            return None
        inner = linalg.solve_triangular(lc, self.noise_gram, lower=True)
        inner = linalg.solve_triangular(lc, inner.T, lower=True)
        lam, vec = np.linalg.eigh(0.5 * (inner + inner.T))
        lam = np.clip(lam, 0.0, None)
        w = lc @ vec
        w_inv = vec.T @ linalg.solve_triangular(lc, np.eye(self.n), lower=True)
        return w, w_inv, lam

    def posterior_batch(self, s: ScheduleSet, t, x0, x):
        """:meth:`posterior` with one time per row of ``x0``/``x``.

        Uses a simultaneous diagonalisation of ``Sigma`` and ``K`` so that all
        times share one factorisation; falls back to a per-row loop when
        ``Sigma`` is singular."""
        t = np.asarray(t, float)
        x0 = np.asarray(x0, float)
        x = np.asarray(x, float)
        wh = self._whitening
        if wh is None:
            rows = [self.posterior(s, float(ti), x0[i], x[i]) for i, ti in enumerate(t)]
            return np.array([r[0] for r in rows]), np.array([r[1] for r in rows])
        w, w_inv, lam = wh
        m = self.cond_mean(x0)
        a, b, g = (f(t)[:, None] for f in (s.alpha, s.beta, s.gamma))
        xi = (x - a * x0 - b * m) @ w_inv.T
        den = b * b + g * g * lam
        inner = (t > 0.0)[:, None]
        safe = np.where(inner, den, 1.0)
        e1 = m + np.where(inner, xi * b / safe, 0.0) @ w.T
        eta = np.where(inner, xi * g * lam / safe, 0.0) @ w.T
        return e1, eta

    def posterior_mean(self, s: ScheduleSet, t: float, x0, x):
        return self.posterior(s, t, x0, x)[0]

    def velocity(self, s: ScheduleSet, t: float, x0, x):
        e1, _ = self.posterior(s, t, x0, x)
        return float(s.alpha_dot(t)) * np.asarray(x0, float) + float(s.beta_dot(t)) * e1

    def denoiser(self, s: ScheduleSet, t: float, x0, x):
        return self.posterior(s, t, x0, x)[1]

    def fields(self, s: ScheduleSet, t: float, x0, x):
        """``(phi, eta)`` at one time for every row of ``x``."""
        e1, eta = self.posterior(s, t, x0, x)
        phi = float(s.alpha_dot(t)) * np.asarray(x0, float) + float(s.beta_dot(t)) * e1
        return phi, eta

    def drift(self, s: ScheduleSet, d: DiffusionParam, t: float, x0, x):
        """Closed-form drift written through ``E[x1 | x0, x_t]`` only::

            (alpha' - alpha ct) x0 + (beta' - beta ct) E[x1|.] + ct x

        with ``ct = gamma'/gamma - eps/gamma^2``.  Defined for ``t`` in (0, 1).
        """
        ct = float(c_tilde(s, d, t))
        e1 = self.posterior_mean(s, t, x0, x)
        a, b = float(s.alpha(t)), float(s.beta(t))
        return ((float(s.alpha_dot(t)) - a * ct) * np.asarray(x0, float)
                + (float(s.beta_dot(t)) - b * ct) * e1 + ct * np.asarray(x, float))


def oracle_posterior_mean(g: GaussianCoupling, s: ScheduleSet, t, x0, x):
    return g.posterior_mean(s, t, x0, x)


def oracle_drift(g: GaussianCoupling, s: ScheduleSet, d: DiffusionParam, t, x0, x):
    return g.drift(s, d, t, x0, x)


class GaussianOracleDrift:
    """Exact velocity/denoiser pair for a Gaussian coupling, in the same
    calling convention as learned fields: ``fields(t, x0, x)``."""

    def __init__(self, coupling: GaussianCoupling, s: ScheduleSet):
        self.coupling = coupling
        self.schedule = s

    def fields(self, t: float, x0, x):
        return self.coupling.fields(self.schedule, t, x0, x)


# -- brute-force conditional expectation -------------------------------------

@dataclass(frozen=True)
class WindowEstimate:
    mean: float
    stderr: float
    width: float
    n_accepted: int


def window_conditional_mean(cond, values, point, n_accept: int = 1000) -> WindowEstimate:
    """Estimate ``E[values | cond = point]`` by averaging over the
    ``n_accept`` draws closest to ``point`` in the max-norm.

    The reported width is the half-side of the accepting box.  This shares
    nothing with the linear-algebra path and is used to check it.
    """
    cond = np.asarray(cond, float).reshape(len(values), -1)
    point = np.asarray(point, float).reshape(1, -1)
    if n_accept < 500:
        raise ValueError("need at least 500 accepted draws")
    dist = np.max(np.abs(cond - point), axis=1)
    idx = np.argpartition(dist, n_accept - 1)[:n_accept]
    acc = np.asarray(values, float)[idx]
    return WindowEstimate(float(acc.mean()), float(acc.std(ddof=1) / np.sqrt(n_accept)),
                          float(dist[idx].max()), n_accept)
