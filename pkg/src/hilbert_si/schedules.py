"""Interpolation schedules, drift coefficients and changes of time.

The only schedule shipped is the rectified-flow one, ``alpha = 1 - t``,
``beta = t``, with noise scale ``gamma = sqrt(b t (1 - t))``.  The denoiser
coefficient ``c(t) = gamma'(t) - eps / gamma(t)`` blows up at the endpoints;
a change of time ``theta`` turns it into ``c_hat(t) = c(theta(t)) theta'(t)``,
which stays finite on [0, 1] when ``theta'`` vanishes at least linearly at
the offending endpoints.

Time-change families (all normalised so that ``theta(1) = 1``):

===========  ==============================
identity     theta' = 1
poly_right   theta' ~ 1 - t
poly_both    theta' ~ t (1 - t)
exp_right    theta' ~ exp(-1 / (1 - t))
exp_both     theta' ~ exp(-1 / (t (1 - t)))
===========  ==============================
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, special
from scipy.interpolate import PchipInterpolator


class DomainError(ValueError):
    """Raised when a coefficient is requested where it is not finite."""


FAMILIES = ("identity", "poly_right", "poly_both", "exp_right", "exp_both")


@dataclass(frozen=True)
class ScheduleSet:
    b: float = 0.01

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"b must be positive, got {self.b}")

    def alpha(self, t):
        return 1.0 - np.asarray(t, float)

    def beta(self, t):
        return np.asarray(t, float) * 1.0

    def gamma(self, t):
        t = np.asarray(t, float)
        # t (1 - t) first: a two-factor product is exactly symmetric under t -> 1 - t
        return np.sqrt(np.clip(self.b * (t * (1.0 - t)), 0.0, None))

    def alpha_dot(self, t):
        return np.full_like(np.asarray(t, float), -1.0)

    def beta_dot(self, t):
        return np.full_like(np.asarray(t, float), 1.0)

    def gamma_dot(self, t):
        t = np.asarray(t, float)
        _require_open(t, "gamma_dot")
        return self.b * (1.0 - 2.0 * t) / (2.0 * self.gamma(t))

    def gamma_gamma_dot(self, t):
        """``gamma * gamma'``, continuous on the closed interval."""
        return self.b * (1.0 - 2.0 * np.asarray(t, float)) / 2.0

    def evaluate(self, t):
        """Return ``(alpha, beta, gamma, alpha', beta', gamma')`` at ``t``."""
        return (self.alpha(t), self.beta(t), self.gamma(t),
                self.alpha_dot(t), self.beta_dot(t), self.gamma_dot(t))


@dataclass(frozen=True)
class DiffusionParam:
    epsilon: float

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")

    @classmethod
    def parse(cls, value, b: float) -> "DiffusionParam":
        """Accept a number or the literal ``"b/2"``."""
        if isinstance(value, str):
            text = value.strip().replace(" ", "")
            if text == "b/2":
                return cls(b / 2.0)
            value = float(text)
        return cls(float(value))

    @property
    def is_ode(self) -> bool:
        return self.epsilon == 0.0

    def is_half_b(self, s: ScheduleSet) -> bool:
        return math.isclose(self.epsilon, s.b / 2.0, rel_tol=1e-12, abs_tol=0.0)


def _require_open(t, what):
    if np.any((t <= 0.0) | (t >= 1.0)):
        raise DomainError(f"{what} is only defined on the open interval (0, 1)")


def c_coeff(s: ScheduleSet, d: DiffusionParam, t):
    """Denoiser coefficient ``gamma'(t) - eps / gamma(t)`` on (0, 1)."""
    t = np.asarray(t, float)
    _require_open(t, "c(t)")
    return s.gamma_dot(t) - d.epsilon / s.gamma(t)


def c_half_b(s: ScheduleSet, t):
    """Closed form of ``c`` at ``eps = b/2``: ``-sqrt(b t / (1 - t))``."""
    t = np.asarray(t, float)
    _require_open(t, "c(t)")
    return -np.sqrt(s.b * t / (1.0 - t))


def c_tilde(s: ScheduleSet, d: DiffusionParam, t):
    """``gamma'/gamma - eps/gamma^2``, the coefficient on ``x`` in the
    re-expressed drift."""
    t = np.asarray(t, float)
    _require_open(t, "c_tilde(t)")
    return (s.gamma_gamma_dot(t) - d.epsilon) / (s.b * t * (1.0 - t))


# -- time changes -----------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(10)


def _gauss(fn, a, b):
    """Fixed-order Gauss-Legendre integral of ``fn`` over ``[a, b]`` (arrays)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = mid[..., None] + half[..., None] * _GL_X
    return half * (fn(nodes) @ _GL_W)


def _exp_right_raw(t):
    with np.errstate(divide="ignore", over="ignore"):
        return np.exp(-1.0 / (1.0 - t))


def _exp_both_raw(t):
    with np.errstate(divide="ignore", over="ignore"):
        return np.exp(-1.0 / (t * (1.0 - t)))


def _exp_right_tail(t):
    """``int_t^1 exp(-1/(1-s)) ds`` via the exponential integral."""
    t = np.asarray(t, float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = 1.0 / (1.0 - t)
        out = np.exp(-a) / a - special.exp1(a)
    return np.where(t >= 1.0, 0.0, out)


class _Table:
    """Cumulative integral of a nonnegative rate on Chebyshev-clustered nodes.

    ``head(t) = int_0^t rate`` and ``tail(t) = int_t^1 rate`` are both
    accurate in a relative sense near their own zero endpoint.
    """

    def __init__(self, rate, n_intervals=2 ** 14):
        self.rate = rate
        k = np.arange(n_intervals + 1)
        nodes = 0.5 * (1.0 - np.cos(np.pi * k / n_intervals))
        nodes[0], nodes[-1] = 0.0, 1.0
        pieces = _gauss(rate, nodes[:-1], nodes[1:])
        self.nodes = nodes
        self.cum = np.concatenate([[0.0], np.cumsum(pieces)])
        self.rcum = np.concatenate([np.cumsum(pieces[::-1])[::-1], [0.0]])
        self.total = float(self.cum[-1])

    def _locate(self, t):
        return np.clip(np.searchsorted(self.nodes, t, side="right") - 1,
                       0, len(self.nodes) - 2)

    def head(self, t):
        t = np.asarray(t, float)
        i = self._locate(t)
        return self.cum[i] + _gauss(self.rate, self.nodes[i], t)

    def tail(self, t):
        t = np.asarray(t, float)
        i = self._locate(t)
        return self.rcum[i + 1] + _gauss(self.rate, t, self.nodes[i + 1])


@dataclass(frozen=True)
class TimeChange:
    """Bijective, increasing reparameterisation of [0, 1].

    Evaluate ``theta(t)``, ``theta_dot(t)``, the tail ``1 - theta(t)``
    (computed without cancellation) and ``inverse(u)``.
    """

    family: str
    norm_const: float = field(init=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown time-change family {self.family!r}; "
                             f"expected one of {FAMILIES}")
        z = {"identity": 1.0, "poly_right": 0.5, "poly_both": 1.0 / 6.0}.get(self.family)
        if self.family == "exp_right":
            z = math.exp(-1.0) - float(special.exp1(1.0))
        elif self.family == "exp_both":
            z = self._table.total
            ref, _ = integrate.quad(_exp_both_raw, 0.0, 1.0, epsabs=0.0, epsrel=1e-12,
                                    limit=200)
            if abs(ref - z) > 1e-8 * ref:
                raise RuntimeError(f"exp_both normalisation disagrees: {z} vs {ref}")
        object.__setattr__(self, "norm_const", z)
        self._check_monotone()

    @cached_property
    def _table(self):
        return _Table(_exp_both_raw)

    def _check_monotone(self):
        t = np.linspace(0.0, 1.0, 10_001)
        th = self.theta(t)
        if th[0] != 0.0 or th[-1] != 1.0 or np.any(np.diff(th) < 0.0):
            raise RuntimeError(f"time change {self.family} is not a monotone bijection")
        if np.any(self.theta_dot(t[1:-1]) <= 0.0) and not self.family.startswith("exp"):
            raise RuntimeError(f"time change {self.family} has a nonpositive rate")

    def theta(self, t):
        t = np.asarray(t, float)
        f = self.family
        if f == "identity":
            out = t * 1.0
        elif f == "poly_right":
            out = t * (2.0 - t)
        elif f == "poly_both":
            out = t * t * (3.0 - 2.0 * t)
        elif f == "exp_right":
            out = 1.0 - _exp_right_tail(t) / self.norm_const
        else:
            out = self._table.head(t) / self.norm_const
        return np.where(t <= 0.0, 0.0, np.where(t >= 1.0, 1.0, out))

    def tail(self, t):
        """``1 - theta(t)`` without cancellation near ``t = 1``."""
        t = np.asarray(t, float)
        f = self.family
        if f == "identity":
            out = 1.0 - t
        elif f == "poly_right":
            out = (1.0 - t) ** 2
        elif f == "poly_both":
            out = (1.0 - t) ** 2 * (1.0 + 2.0 * t)
        elif f == "exp_right":
            out = _exp_right_tail(t) / self.norm_const
        else:
            out = self._table.tail(t) / self.norm_const
        return np.where(t <= 0.0, 1.0, np.where(t >= 1.0, 0.0, out))

    def theta_dot(self, t):
        t = np.asarray(t, float)
        f = self.family
        if f == "identity":
            return np.ones_like(t)
        if f == "poly_right":
            return 2.0 * (1.0 - t)
        if f == "poly_both":
            return 6.0 * t * (1.0 - t)
        if f == "exp_right":
            return _exp_right_raw(t) / self.norm_const
        return _exp_both_raw(t) / self.norm_const

    @cached_property
    def _inverse_table(self):
        n = 2 ** 14
        t = 0.5 * (1.0 - np.cos(np.pi * np.arange(n + 1) / n))
        th = self.theta(t)
        keep = np.concatenate([[True], np.diff(th) > 1e-13])
        return th[keep], t[keep]

    def inverse(self, u):
        u = np.asarray(u, float)
        if np.any((u < 0.0) | (u > 1.0)):
            raise DomainError("theta inverse is defined on [0, 1]")
        f = self.family
        if f == "identity":
            return u * 1.0
        if f == "poly_right":
            return 1.0 - np.sqrt(1.0 - u)
        if f == "poly_both":
            return 0.5 - np.sin(np.arcsin(1.0 - 2.0 * u) / 3.0)
        th, tt = self._inverse_table
        guess = PchipInterpolator(th, tt)(u)
        idx = np.clip(np.searchsorted(th, u, side="right") - 1, 0, len(th) - 2)
        lo, hi = tt[idx], tt[idx + 1]
        x = np.clip(guess, lo, hi)
        for _ in range(3):
            rate = self.theta_dot(x)
            with np.errstate(divide="ignore", invalid="ignore"):
                step = np.where(rate > 0.0, (self.theta(x) - u) / rate, 0.0)
            x = np.clip(x - step, lo, hi)
        return np.where(u <= 0.0, 0.0, np.where(u >= 1.0, 1.0, x))


def make_time_change(family: str, d: DiffusionParam | None = None,
                     s: ScheduleSet | None = None) -> TimeChange:
    """Build a normalised time change.  ``d`` and ``s`` are accepted for
    symmetry with :func:`validate_time_change`; the families themselves do
    not depend on them."""
    return _cached_time_change(family)


_TC_CACHE: dict[str, TimeChange] = {}


def _cached_time_change(family):
    if family not in _TC_CACHE:
        _TC_CACHE[family] = TimeChange(family)
    return _TC_CACHE[family]


# -- validity of a time change ---------------------------------------------

PASS, FAIL, INCONCLUSIVE, SKIPPED = "PASS", "FAIL", "INCONCLUSIVE", "SKIPPED"


@dataclass(frozen=True)
class ConditionResult:
    status: str
    quotients: np.ndarray = field(repr=False)
    growth: float


@dataclass(frozen=True)
class ValidityReport:
    family: str
    epsilon: float
    right: ConditionResult  # lim_{t->1} theta'(t) / (2 (1 - t))
    left: ConditionResult   # lim_{t->0} theta'(t) / (2 t), only when eps != b/2

    @property
    def valid(self) -> bool:
        return self.right.status == PASS and self.left.status in (PASS, SKIPPED)

    def finite_at(self, endpoint: float) -> bool:
        if endpoint == 1.0:
            return self.right.status == PASS
        return self.left.status in (PASS, SKIPPED)


GEOMETRIC_K = np.arange(4, 41)


def _judge(q, cauchy_tol, growth_factor) -> ConditionResult:
    first, prev, last = abs(q[0]), abs(q[-2]), abs(q[-1])
    if not np.all(np.isfinite(q)):
        return ConditionResult(FAIL, q, math.inf)
    growth = last / first if first > 0 else (math.inf if last > 0 else 1.0)
    if growth > growth_factor:
        status = FAIL
    elif abs(last - prev) <= cauchy_tol * max(last, prev):
        status = PASS
    else:
        status = INCONCLUSIVE
    return ConditionResult(status, q, growth)


def validate_time_change(tc: TimeChange, d: DiffusionParam, s: ScheduleSet,
                         cauchy_tol: float = 0.05,
                         growth_factor: float = 10.0) -> ValidityReport:
    """Numerical check of the endpoint conditions that make ``c_hat`` finite.

    Both limit quotients are sampled at ``t = 1 - 2^-k`` and ``t = 2^-k`` for
    ``k = 4..40``.  A sequence PASSes when its last two values agree to
    ``cauchy_tol`` and FAILs when it grows by more than ``growth_factor``.
    """
    h = 2.0 ** -GEOMETRIC_K
    right = _judge(tc.theta_dot(1.0 - h) / (2.0 * h), cauchy_tol, growth_factor)
    if d.is_half_b(s):
        left = ConditionResult(SKIPPED, np.empty(0), 1.0)
    else:
        left = _judge(tc.theta_dot(h) / (2.0 * h), cauchy_tol, growth_factor)
    return ValidityReport(tc.family, d.epsilon, right, left)


_REPORTS: dict[tuple, ValidityReport] = {}


def _report(tc, d, s):
    key = (tc.family, d.epsilon, s.b)
    if key not in _REPORTS:
        _REPORTS[key] = validate_time_change(tc, d, s)
    return _REPORTS[key]


# -- time-changed coefficient ------------------------------------------------

def _chat_interior(tc, s, eps, t):
    """``c(theta) theta'`` written to avoid 0/0 where theta' and 1-theta
    vanish together."""
    f = tc.family
    b = s.b
    rb = math.sqrt(b)
    if f == "poly_right":
        w = t * (2.0 - t)
        first = (b - 2.0 * eps) / (rb * np.sqrt(w)) if b != 2.0 * eps else 0.0
        return first - 2.0 * rb * np.sqrt(w)
    if f == "poly_both":
        p, q = 3.0 - 2.0 * t, 1.0 + 2.0 * t
        first = 3.0 * (b - 2.0 * eps) / (rb * np.sqrt(p * q))
        return first - 6.0 * rb * t * t * np.sqrt(p) / np.sqrt(q)
    th, tail, rate = tc.theta(t), tc.tail(t), tc.theta_dot(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        first = 0.0
        if b != 2.0 * eps:
            first = (b - 2.0 * eps) / (2.0 * rb) * rate / np.sqrt(th * tail)
        second = -rb * np.sqrt(th) * rate / np.sqrt(tail)
        out = first + second
    # deep in the exp families' flat ends theta (or its tail) underflows to 0
    # while theta' is still a subnormal-sized positive number; the true value
    # there is below 1e-100, so return the limit 0
    return np.where((rate == 0.0) | (th <= 0.0) | (tail <= 0.0), 0.0, out)


def chat_coeff(tc: TimeChange, s: ScheduleSet, d: DiffusionParam, t):
    """Time-changed denoiser coefficient ``c(theta(t)) theta'(t)``.

    At an endpoint the continuous extension is returned: closed-form for the
    polynomial families and the identity, a one-sided limit along the
    geometric grid otherwise.  Raises :class:`DomainError` at an endpoint
    where the time change does not make the coefficient finite.
    """
    t = np.asarray(t, float)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    if np.any((t < 0.0) | (t > 1.0)):
        raise DomainError("c_hat is defined on [0, 1]")
    out = np.empty_like(t)
    inner = (t > 0.0) & (t < 1.0)
    eps = d.epsilon
    if tc.family == "identity":
        out[inner] = c_coeff(s, d, t[inner])
    else:
        out[inner] = _chat_interior(tc, s, eps, t[inner])
    for endpoint in (0.0, 1.0):
        mask = t == endpoint
        if not np.any(mask):
            continue
        if not _report(tc, d, s).finite_at(endpoint):
            raise DomainError(
                f"c_hat has no finite value at t={endpoint:g} for the "
                f"{tc.family} time change with eps={eps:g}")
        out[mask] = _chat_endpoint(tc, s, d, endpoint)
    return out[0] if scalar else out


def _chat_endpoint(tc, s, d, endpoint):
    eps, b = d.epsilon, s.b
    if tc.family == "identity":
        # only reachable at t=0 with eps=b/2, where c(t) = -sqrt(bt/(1-t)) -> 0
        return 0.0
    if tc.family in ("poly_right", "poly_both"):
        with np.errstate(divide="ignore", invalid="ignore"):
            val = _chat_interior(tc, s, eps, np.array([endpoint]))[0]
        if tc.family == "poly_right" and endpoint == 0.0:
            # first term vanishes identically at eps=b/2
            val = 0.0
        return float(val)
    # exp families: theta' decays faster than any power at a flat end, so
    # both terms of c(theta) theta' vanish there; at a non-flat end the limit
    # is finite only for eps = b/2, where the remaining term is
    # -sqrt(b theta) theta' / sqrt(1 - theta) -> 0 as well
    return 0.0


def chat_raw(tc: TimeChange, s: ScheduleSet, d: DiffusionParam, t):
    """``c(theta(t)) theta'(t)`` without any endpoint treatment.

    Used only to let an invalid schedule run (and blow up) in ablations;
    evaluates to +-inf or nan where the coefficient has no finite limit.
    """
    t = np.asarray(t, float)
    th = tc.theta(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.sqrt(np.clip(s.b * th * (1.0 - th), 0.0, None))
        c = s.b * (1.0 - 2.0 * th) / (2.0 * gamma) - d.epsilon / gamma
        return c * tc.theta_dot(t)
