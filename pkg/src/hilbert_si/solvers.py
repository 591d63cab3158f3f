"""Integrators for the time-changed conditional-bridge SDE.

In the changed time ``t`` the bridge reads

    dX = [phi(theta, x0, X) theta' + c_hat(t) eta(theta, x0, X)] dt
         + sqrt(2 eps theta') dW_C

with ``theta = theta(t)``.  Steps are uniform in ``t``.  Three schemes:

em1   Euler-Maruyama.
em2   stochastic predictor-corrector: the predictor is an em1 step, the
      corrector averages the two drifts and reuses the same increment dW.
heun  deterministic predictor (no noise), trapezoidal corrector, dW added once.

With ``eps = 0`` em2 and heun are both the classical Heun method.

Noise increments draw one ``N(0, C)`` sample per path and step.  Drift fields
are objects with ``fields(t, x0, x) -> (phi, eta)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .schedules import (DiffusionParam, ScheduleSet, TimeChange, chat_coeff, chat_raw,
                        make_time_change)

log = logging.getLogger(__name__)

SCHEMES = ("em1", "em2", "heun")


class NonFiniteStateError(ArithmeticError):
    def __init__(self, step, t):
        super().__init__(f"non-finite state after step {step} (t = {t:.6g})")
        self.step = step
        self.t = t


@dataclass(frozen=True)
class SolverConfig:
    n_steps: int = 100
    scheme: str = "em2"
    epsilon: DiffusionParam = DiffusionParam(0.005)
    time_change: TimeChange = field(default_factory=lambda: make_time_change("poly_right"))
    seed: int = 0
    schedule: ScheduleSet = ScheduleSet()
    raw: bool = False  # evaluate c_hat without endpoint treatment (ablations only)

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")


def _bc(v, like):
    v = np.asarray(v, float)
    return v.reshape(v.shape + (1,) * (np.ndim(like) - v.ndim))


def tc_drift(fields, tc: TimeChange, s: ScheduleSet, d: DiffusionParam, t, x0, x,
             raw: bool = False):
    """Time-changed drift ``phi(theta) theta' + c_hat(t) eta(theta)``."""
    t = float(t)
    th = float(tc.theta(t))
    rate = float(tc.theta_dot(t))
    coef = float(chat_raw(tc, s, d, t)) if raw else float(chat_coeff(tc, s, d, t))
    phi, eta = fields.fields(th, x0, x)
    out = coef * np.asarray(eta)
    if rate != 0.0:
        out = out + rate * np.asarray(phi)
    return out


class NoiseSource:
    """Draws ``N(0, C)`` samples and counts the draws."""

    def __init__(self, noise_field, rng: np.random.Generator):
        self.factor = noise_field.factor
        self.rng = rng
        self.draws = 0

    def draw(self, shape):
        self.draws += 1
        xi = self.rng.standard_normal(tuple(shape))
        return xi @ self.factor.T


def noise_increment(noise, d: DiffusionParam, tc: TimeChange, t, dt, shape):
    """``sqrt(2 eps theta'(t) dt) zeta`` with ``zeta ~ N(0, C)``; zero for eps = 0.

    ``noise`` is a :class:`NoiseSource`.  Nothing is drawn in the ODE case.
    """
    if d.is_ode:
        return np.zeros(shape)
    amp = np.sqrt(2.0 * d.epsilon * float(tc.theta_dot(t)) * dt)
    return amp * noise.draw(shape)


def step_em1(x, t, dt, drift, dw):
    return x + drift(t, x) * dt + dw


def step_em2(x, t, dt, drift, dw):
    f0 = drift(t, x)
    pred = x + f0 * dt + dw
    return x + 0.5 * (f0 + drift(t + dt, pred)) * dt + dw


def step_heun(x, t, dt, drift, dw):
    f0 = drift(t, x)
    pred = x + f0 * dt
    return x + 0.5 * (f0 + drift(t + dt, pred)) * dt + dw


STEPPERS = {"em1": step_em1, "em2": step_em2, "heun": step_heun}


@dataclass
class Trajectory:
    times: np.ndarray
    terminal: np.ndarray = field(repr=False)
    states: np.ndarray | None = field(default=None, repr=False)
    diverged_step: int | None = None
    noise_draws: int = 0

    @property
    def finite(self) -> bool:
        return self.diverged_step is None


def integrate(x_init, drift, n_steps, scheme, noise_fn, keep_states=False,
              on_nonfinite="raise") -> Trajectory:
    """Generic loop: ``noise_fn(t, dt)`` returns the increment for one step."""
    dt = 1.0 / n_steps
    times = np.arange(n_steps + 1) * dt
    times[-1] = 1.0
    step = STEPPERS[scheme]
    x = np.array(x_init, dtype=float)
    states = [x.copy()] if keep_states else None
    diverged = None
    for k in range(n_steps):
        t = times[k]
        h = times[k + 1] - t
        with np.errstate(over="ignore", invalid="ignore"):
            x = step(x, t, h, drift, noise_fn(t, h))
        if keep_states:
            states.append(x.copy())
        if not np.all(np.isfinite(x)):
            if on_nonfinite == "raise":
                raise NonFiniteStateError(k + 1, times[k + 1])
            diverged = k + 1
            log.warning("state became non-finite at step %d (t = %.4g)", k + 1, times[k + 1])
            break
    return Trajectory(times, x, np.array(states) if keep_states else None, diverged)


def sample_trajectory(x0, fields, cfg: SolverConfig, noise_field, heterogeneous=False,
                      keep_states=False, on_nonfinite="raise") -> Trajectory:
    """Integrate from ``X_0 = x0`` (or ``(x0, 0)`` in the product space) to
    ``t = 1``.  ``x0`` has shape ``(P, n)``; all ``P`` paths advance together."""
    x0 = np.asarray(x0, float)
    if x0.shape[-1] != noise_field.n_points:
        raise ValueError("x0 is not on the noise field's grid")
    if heterogeneous:
        x_init = np.stack([x0, np.zeros_like(x0)], axis=-2)
    else:
        x_init = x0.copy()
    tc, s, d = cfg.time_change, cfg.schedule, cfg.epsilon
    rng = np.random.default_rng(cfg.seed)
    noise = NoiseSource(noise_field, rng)

    def drift(t, x):
        return tc_drift(fields, tc, s, d, t, x0, x, raw=cfg.raw)

    def noise_fn(t, dt):
        return noise_increment(noise, d, tc, t, dt, x_init.shape)

    traj = integrate(x_init, drift, cfg.n_steps, cfg.scheme, noise_fn, keep_states,
                     on_nonfinite)
    traj.noise_draws = noise.draws
    return traj


def as_reverse_sampler(x1, reverse_fields, cfg: SolverConfig, noise_field,
                       heterogeneous=False, **kw) -> Trajectory:
    """Run the bridge backwards by integrating a forward bridge whose fields
    were fitted on role-swapped pairs, started from ``x1``."""
    return sample_trajectory(x1, reverse_fields, cfg, noise_field, heterogeneous, **kw)


def prediction(traj: Trajectory, heterogeneous: bool) -> np.ndarray:
    """Terminal target estimate: channel 1 in the product space."""
    return traj.terminal[..., 1, :] if heterogeneous else traj.terminal
