"""Property checks against the closed-form Gaussian bridge.

Each check returns a :class:`Check` with the measured value and the
threshold; the CLI prints them and the acceptance tests assert on them.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .bridge import GaussianCoupling, GaussianOracleDrift, assemble_drift, window_conditional_mean
from .function_space import Grid
from .gaussian_field import RbfKernel, build_field
from .models import Architecture, SpectralOperatorModel, loss_decomposition_check
from .schedules import DiffusionParam, ScheduleSet, make_time_change
from .solvers import SolverConfig, sample_trajectory


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    measured: str
    threshold: str
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name}: {self.measured} (need {self.threshold}) [{self.seconds:.1f}s]"


def gaussian_toy(n_points: int = 32, noise_length_scale: float = 0.05):
    """The fixed linear-Gaussian test coupling.

    ``x0 ~ N(0, K_0.05 + 0.01 I)``; ``x1 = M x0 + w`` with ``M`` half identity,
    half a normalised RBF(0.01) smoother, and ``w ~ N(0, 0.25 K_0.05 + 0.01 I)``.
    Returns ``(coupling, noise_field)``.
    """
    grid = Grid(n_points)
    fld = build_field(RbfKernel(noise_length_scale), grid)
    x = grid.points
    eye = np.eye(n_points)
    k05 = RbfKernel(0.05)(x, x)
    smooth = RbfKernel(0.01)(x, x)
    transfer = 0.5 * eye + 0.5 * smooth / smooth.sum(axis=1, keepdims=True)
    coupling = GaussianCoupling.linear(k05 + 0.01 * eye, transfer,
                                       0.25 * k05 + 0.01 * eye, fld.gram)
    return coupling, fld


def _timed(fn):
    def wrapper(*a, **kw):
        t0 = time.perf_counter()
        chk = fn(*a, **kw)
        return Check(chk.name, chk.passed, chk.measured, chk.threshold,
                     time.perf_counter() - t0)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def check_drift_identity(coupling, s: ScheduleSet, d: DiffusionParam, n_draws=1000,
                         seed=0, tol=1e-9) -> Check:
    """Velocity/denoiser assembly equals the re-expressed closed form."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_draws):
        t = float(rng.uniform(0.05, 0.95))
        x0 = rng.standard_normal(coupling.n)
        x = rng.standard_normal(coupling.n)
        phi, eta = coupling.fields(s, t, x0, x)
        a = assemble_drift(phi, eta, t, s, d)
        b = coupling.drift(s, d, t, x0, x)
        worst = max(worst, float(np.linalg.norm(a - b) / np.linalg.norm(b)))
    return Check(f"drift identity (eps={d.epsilon:g})", worst < tol,
                 f"max rel err {worst:.3g}", f"< {tol:g}")


@_timed
def check_transport(coupling, fld, s: ScheduleSet, scheme="em2", n_steps=200,
                    n_paths=10000, family="poly_right", seed=0, cov_tol=0.05,
                    z_tol=3.0) -> Check:
    """SDE terminal law equals the exact conditional law of ``x1 | x0``."""
    d = DiffusionParam.parse("b/2", s.b)
    x0 = coupling.sample(np.random.default_rng(seed + 1), 1)[0][0]
    cfg = SolverConfig(n_steps, scheme, d, make_time_change(family), seed, s)
    traj = sample_trajectory(np.broadcast_to(x0, (n_paths, coupling.n)),
                             GaussianOracleDrift(coupling, s), cfg, fld)
    x1 = traj.terminal
    mean = coupling.cond_mean(x0)
    se = x1.std(axis=0, ddof=1) / math.sqrt(n_paths)
    zmax = float(np.max(np.abs(x1.mean(axis=0) - mean) / se))
    emp = np.cov(x1, rowvar=False)
    rel = float(np.linalg.norm(emp - coupling.cond_cov) / np.linalg.norm(coupling.cond_cov))
    ok = zmax < z_tol and rel < cov_tol
    return Check(f"transport {scheme} T={n_steps} {family}", ok,
                 f"max |z| {zmax:.3g}, cov rel err {rel:.3g}",
                 f"|z| < {z_tol:g}, cov < {cov_tol:g}")


@_timed
def check_ode_limit(coupling, fld, s: ScheduleSet, n_steps=200, family="poly_both",
                    seed=0, tol=0.02) -> Check:
    """With eps = 0 the bridge carries x0 to the conditional mean."""
    x0 = coupling.sample(np.random.default_rng(seed + 2), 1)[0]
    cfg = SolverConfig(n_steps, "heun", DiffusionParam(0.0), make_time_change(family), seed, s)
    traj = sample_trajectory(x0, GaussianOracleDrift(coupling, s), cfg, fld)
    mean = coupling.cond_mean(x0)
    rel = float(np.linalg.norm(traj.terminal - mean) / np.linalg.norm(mean))
    return Check(f"ODE limit {family} T={n_steps}", rel < tol, f"rel L2 {rel:.3g}", f"< {tol:g}")


@_timed
def check_scalar_mc(n_draws=10_000_000, n_accept=2000, t=0.3, sigma2=0.5, b=1.0,
                    seed=0, point=(0.5, 0.8)) -> Check:
    """Scalar coupling: oracle ``E[d/dt x_t | x0, x_t]`` against a brute-force
    window estimate that never touches the linear-algebra path."""
    s = ScheduleSet(b)
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(n_draws)
    x1 = x0 + math.sqrt(sigma2) * rng.standard_normal(n_draws)
    z = rng.standard_normal(n_draws)
    a, be, g = float(s.alpha(t)), float(s.beta(t)), float(s.gamma(t))
    xt = a * x0 + be * x1 + g * z
    vel = float(s.alpha_dot(t)) * x0 + float(s.beta_dot(t)) * x1 + float(s.gamma_dot(t)) * z
    est = window_conditional_mean(np.stack([x0, xt], axis=1), vel, point, n_accept)
    one = np.ones((1, 1))
    cpl = GaussianCoupling(one, one, one * (1.0 + sigma2), one)
    phi, eta = cpl.fields(s, t, np.array([point[0]]), np.array([point[1]]))
    oracle = float(phi[0] + float(s.gamma_dot(t)) * eta[0])
    z_score = abs(est.mean - oracle) / est.stderr
    return Check("scalar brute-force conditional velocity", z_score < 3.0,
                 f"oracle {oracle:.4f}, MC {est.mean:.4f} +- {est.stderr:.4f} "
                 f"(window {est.width:.3g}, {est.n_accepted} draws)", "|z| < 3")


@_timed
def check_marginal_moments(coupling, s: ScheduleSet, t=0.4, n_draws=10000, seed=0) -> Check:
    rng = np.random.default_rng(seed)
    x0, x1, z = coupling.sample(rng, n_draws)
    a, b, g = float(s.alpha(t)), float(s.beta(t)), float(s.gamma(t))
    xt = a * x0 + b * x1 + g * z
    sd = xt.std(axis=0, ddof=1)
    zmax = float(np.max(np.abs(xt.mean(axis=0)) / (sd / math.sqrt(n_draws))))
    var = np.diag(a * a * coupling.sigma00 + 2 * a * b * coupling.sigma01
                  + b * b * coupling.sigma11 + g * g * coupling.noise_gram)
    rel = float(np.max(np.abs(sd ** 2 - var) / var))
    return Check(f"interpolant moments t={t:g}", zmax < 3.0 and rel < 0.10,
                 f"max |z| {zmax:.3g}, max var rel err {rel:.3g}", "|z| < 3, var < 0.1")


def random_model(seed: int, n_points: int = 32) -> SpectralOperatorModel:
    arch = Architecture(4, 1, n_modes=8, width=16, n_layers=2)
    return SpectralOperatorModel.initialize(arch, np.random.default_rng(seed))


@_timed
def check_loss_constant(coupling, s: ScheduleSet, target_kind: str, n_samples=100_000,
                        seed=0, model_seeds=(11, 12)) -> Check:
    """``L - E`` does not depend on the model."""
    res = [loss_decomposition_check(random_model(ms), coupling, s, target_kind, n_samples, seed)
           for ms in model_seeds]
    a, b = res
    comb = math.sqrt(a.stderr ** 2 + b.stderr ** 2)
    gap = abs(a.constant - b.constant)
    ok = gap <= 3.0 * comb
    extra = ""
    if target_kind == "denoiser":
        bound = float(np.mean(np.diag(coupling.noise_gram)))
        ok = ok and max(a.constant, b.constant) <= bound + 3.0 * max(a.stderr, b.stderr)
        extra = f", bound E|z|^2 = {bound:.3g}"
    return Check(f"loss constant ({target_kind})", ok,
                 f"L-E = {a.constant:.5g} +- {a.stderr:.2g} vs {b.constant:.5g} +- "
                 f"{b.stderr:.2g}, gap {gap:.3g}{extra}", f"gap <= {3 * comb:.3g}")


def run_suite(n_points=32, noise_length_scale=0.05, b=0.01, paths=10000, steps=200,
              heun_steps=1000, decomposition_samples=100_000, seed=0):
    """All oracle checks; returns the list of :class:`Check`."""
    s = ScheduleSet(b)
    coupling, fld = gaussian_toy(n_points, noise_length_scale)
    half = DiffusionParam.parse("b/2", b)
    return [
        check_drift_identity(coupling, s, half, seed=seed),
        check_drift_identity(coupling, s, DiffusionParam(0.0), seed=seed + 1),
        check_marginal_moments(coupling, s, seed=seed),
        check_scalar_mc(seed=seed),
        check_ode_limit(coupling, fld, s, steps, seed=seed),
        check_transport(coupling, fld, s, "em2", steps, paths, seed=seed),
        check_transport(coupling, fld, s, "heun", heun_steps, paths, seed=seed),
        check_loss_constant(coupling, s, "velocity", decomposition_samples, seed),
        check_loss_constant(coupling, s, "denoiser", decomposition_samples, seed),
    ]
