"""Learned velocity and denoiser fields.

A small Fourier neural operator with hand-written reverse mode:

    lift -> n_layers x [spectral conv + pointwise mix, time gate, GELU] -> project

Each spectral block keeps the lowest ``n_modes`` real-FFT modes.  Because the
sensor grid includes both endpoints, the transform runs over the first
``n - 1`` sensors, treated as one period of the unit torus, and the value at
``w = 1`` is copied from ``w = 0``.  Refining the grid from ``n`` to
``2n - 1`` sensors then nests, and band-limited periodic inputs give the same
outputs on shared sensors.  Forward transforms are unnormalised, inverse
transforms carry the ``1/N`` factor (numpy's rfft/irfft convention).  Only a
handful of modes are kept and ``N = 127`` is prime at the default resolution,
so the truncated transform is applied as a product with cached cos/sin
matrices rather than through a full FFT.

The time gate of every block is ``(1 + p_l(t)) * pre + q_l(t)`` with per-channel
cubics ``p_l, q_l``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bridge import embed_pair
from .schedules import ScheduleSet

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
GATE_DEGREE = 3
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class Architecture:
    in_channels: int
    out_channels: int
    n_modes: int = 16
    width: int = 32
    n_layers: int = 3

    def __post_init__(self):
        for k in ("in_channels", "out_channels", "n_modes", "width"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be nonnegative")

    def param_shapes(self):
        c, o, w, m = self.in_channels, self.out_channels, self.width, self.n_modes
        shapes = [("lift_w", (c, w)), ("lift_b", (w,))]
        for l in range(self.n_layers):
            shapes += [(f"spec_re{l}", (m, w, w)), (f"spec_im{l}", (m, w, w)),
                       (f"mix_w{l}", (w, w)), (f"mix_b{l}", (w,)),
                       (f"gate_scale{l}", (GATE_DEGREE + 1, w)),
                       (f"gate_shift{l}", (GATE_DEGREE + 1, w))]
        shapes += [("proj_w", (w, o)), ("proj_b", (o,))]
        return shapes

    def n_params(self) -> int:
        return sum(math.prod(s) for _, s in self.param_shapes())

    def check_grid(self, n_points: int) -> None:
        """Raise ``ValueError`` if ``n_points`` sensors cannot hold the kept modes."""
        if self.n_layers and self.n_modes - 1 > (n_points - 2) // 2:
            raise ValueError(f"{self.n_modes} modes need at least "
                             f"{2 * self.n_modes} sensors, got {n_points}")


def _gelu_parts(z):
    th = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z * z))
    return 0.5 * z * (1.0 + th), th


def gelu(z):
    return _gelu_parts(z)[0]


def gelu_grad(z, th=None):
    if th is None:
        th = _gelu_parts(z)[1]
    z2 = z * z
    return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * z2)


_BASIS: dict[tuple[int, int], tuple] = {}


def dft_basis(per: int, n_modes: int):
    """``(C, S, Ci, Si)`` so that for real ``h`` on ``per`` periodic sensors
    ``rfft(h)[:n_modes] = h @ C - 1j * (h @ S)`` and
    ``irfft(Y, per) = Y.real @ Ci + Y.imag @ Si`` for ``Y`` with ``n_modes``
    retained modes below the Nyquist index."""
    key = (per, n_modes)
    if key not in _BASIS:
        theta = 2.0 * np.pi * np.outer(np.arange(per), np.arange(n_modes)) / per
        c, s = np.cos(theta), np.sin(theta)
        ck = np.full(n_modes, 2.0 / per)
        ck[0] = 1.0 / per
        _BASIS[key] = (c, s, (c * ck).T.copy(), -(s * ck).T.copy())
    return _BASIS[key]


def _outer_sum(a, b):
    """``sum_{batch, sensor} a[:, i, :] b[:, o, :]`` as an ``(i, o)`` matrix."""
    return (a @ b.transpose(0, 2, 1)).sum(axis=0)


def _time_powers(t, batch):
    t = np.broadcast_to(np.asarray(t, float), (batch,))
    return t[:, None] ** np.arange(GATE_DEGREE + 1)


class SpectralOperatorModel:
    """Parameters live in one flat float64 vector; named views index into it."""

    def __init__(self, arch: Architecture, params=None):
        self.arch = arch
        n = arch.n_params()
        self.params = np.zeros(n) if params is None else np.array(params, dtype=float)
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.params.shape}")
        self._offsets = {}
        pos = 0
        for name, shape in arch.param_shapes():
            size = math.prod(shape)
            self._offsets[name] = (pos, shape)
            pos += size

    @classmethod
    def initialize(cls, arch: Architecture, rng: np.random.Generator):
        m = cls(arch)
        w = arch.width
        for name, (pos, shape) in m._offsets.items():
            if name == "lift_w":
                std = 1.0 / math.sqrt(arch.in_channels)
            elif name.startswith("spec_"):
                std = 1.0 / math.sqrt(2.0 * w * arch.n_modes)
            elif name.startswith("mix_w"):
                std = 1.0 / math.sqrt(w)
            elif name == "proj_w":
                std = 1.0 / math.sqrt(w)
            else:
                continue
            m.params[pos:pos + math.prod(shape)] = std * rng.standard_normal(math.prod(shape))
        log.info("model with %d parameters", arch.n_params())
        return m

    @property
    def n_params(self) -> int:
        return self.params.size

    def view(self, name, vec=None):
        pos, shape = self._offsets[name]
        vec = self.params if vec is None else vec
        return vec[pos:pos + math.prod(shape)].reshape(shape)

    def copy(self) -> "SpectralOperatorModel":
        return SpectralOperatorModel(self.arch, self.params.copy())

    # -- forward / backward --------------------------------------------------

    def _check(self, inp):
        inp = np.asarray(inp, float)
        if inp.ndim != 3 or inp.shape[1] != self.arch.in_channels:
            raise ValueError(f"expected input (batch, {self.arch.in_channels}, n), "
                             f"got {inp.shape}")
        self.arch.check_grid(inp.shape[2])
        return inp

    def forward(self, t, inp):
        return self._forward(t, inp, keep=False)[0]

    __call__ = forward

    def _forward(self, t, inp, keep=True):
        inp = self._check(inp)
        a = self.arch
        batch, _, n = inp.shape
        per = n - 1
        tp = _time_powers(t, batch)
        h = np.matmul(self.view("lift_w").T, inp) + self.view("lift_b")[:, None]
        cache = {"inp": inp, "tp": tp, "layers": []}
        if a.n_layers:
            c, sn, ci, si = dft_basis(per, a.n_modes)
        for l in range(a.n_layers):
            h_prev = h
            hp = np.ascontiguousarray(h[..., :per]).reshape(batch * a.width, per)
            # modes first: (M, B, W)
            xr = np.ascontiguousarray((hp @ c).T).reshape(a.n_modes, batch, a.width)
            xi = -np.ascontiguousarray((hp @ sn).T).reshape(a.n_modes, batch, a.width)
            rr, ri = self.view(f"spec_re{l}"), self.view(f"spec_im{l}")
            yr = xr @ rr - xi @ ri
            yi = xr @ ri + xi @ rr
            spec = (yr.reshape(a.n_modes, -1).T @ ci + yi.reshape(a.n_modes, -1).T @ si)
            spec = spec.reshape(batch, a.width, per)
            pre = np.concatenate([spec, spec[..., :1]], axis=-1)
            pre += np.matmul(self.view(f"mix_w{l}").T, h) + self.view(f"mix_b{l}")[:, None]
            scale = 1.0 + tp @ self.view(f"gate_scale{l}")
            shift = tp @ self.view(f"gate_shift{l}")
            z = scale[:, :, None] * pre + shift[:, :, None]
            h, th = _gelu_parts(z)
            if keep:
                cache["layers"].append((h_prev, xr, xi, pre, scale, z, th))
        out = np.matmul(self.view("proj_w").T, h) + self.view("proj_b")[:, None]
        cache["h_last"] = h
        return out, cache

    def backward(self, cache, g_out):
        """Gradient of ``sum(g_out * forward(...))`` w.r.t. the flat parameters."""
        a = self.arch
        grad = np.zeros_like(self.params)
        h = cache["h_last"]
        tp = cache["tp"]
        self.view("proj_w", grad)[...] = _outer_sum(h, g_out)
        self.view("proj_b", grad)[...] = g_out.sum(axis=(0, 2))
        g_h = np.matmul(self.view("proj_w"), g_out)
        per = g_out.shape[-1] - 1
        if a.n_layers:
            c, sn, ci, si = dft_basis(per, a.n_modes)
        for l in reversed(range(a.n_layers)):
            h_prev, xr, xi, pre, scale, z, th = cache["layers"][l]
            batch = pre.shape[0]
            g_z = g_h * gelu_grad(z, th)
            self.view(f"gate_scale{l}", grad)[...] = tp.T @ np.sum(g_z * pre, axis=-1)
            self.view(f"gate_shift{l}", grad)[...] = tp.T @ np.sum(g_z, axis=-1)
            g_pre = g_z * scale[:, :, None]
            self.view(f"mix_w{l}", grad)[...] = _outer_sum(h_prev, g_pre)
            self.view(f"mix_b{l}", grad)[...] = g_pre.sum(axis=(0, 2))
            g_h = np.matmul(self.view(f"mix_w{l}"), g_pre)
            g_spec = g_pre[..., :per].copy()
            g_spec[..., 0] += g_pre[..., per]
            g_spec = g_spec.reshape(batch * a.width, per)
            # gradient w.r.t. (Re Y, Im Y), modes first
            gyr = np.ascontiguousarray((g_spec @ ci.T).T).reshape(a.n_modes, batch, a.width)
            gyi = np.ascontiguousarray((g_spec @ si.T).T).reshape(a.n_modes, batch, a.width)
            rr, ri = self.view(f"spec_re{l}"), self.view(f"spec_im{l}")
            xrt, xit = xr.transpose(0, 2, 1), xi.transpose(0, 2, 1)
            self.view(f"spec_re{l}", grad)[...] = xrt @ gyr + xit @ gyi
            self.view(f"spec_im{l}", grad)[...] = xrt @ gyi - xit @ gyr
            rrt, rit = rr.transpose(0, 2, 1), ri.transpose(0, 2, 1)
            gxr = gyr @ rrt + gyi @ rit
            gxi = gyi @ rrt - gyr @ rit
            g_hp = (gxr.reshape(a.n_modes, -1).T @ c.T - gxi.reshape(a.n_modes, -1).T @ sn.T)
            g_h[..., :per] += g_hp.reshape(batch, a.width, per)
        self.view("lift_w", grad)[...] = _outer_sum(cache["inp"], g_h)
        self.view("lift_b", grad)[...] = g_h.sum(axis=(0, 2))
        return grad


def reference_forward(m: SpectralOperatorModel, t: float, inp):
    """Loop-by-loop evaluation of one sample, written independently of the
    vectorised path (explicit DFT sums, no FFT)."""
    a = m.arch
    inp = np.asarray(inp, float)
    c_in, n = inp.shape
    per = n - 1
    lift_w, lift_b = m.view("lift_w"), m.view("lift_b")
    h = [[sum(lift_w[c, w] * inp[c, j] for c in range(c_in)) + lift_b[w]
          for j in range(n)] for w in range(a.width)]
    tp = [t ** k for k in range(GATE_DEGREE + 1)]
    for l in range(a.n_layers):
        re, im = m.view(f"spec_re{l}"), m.view(f"spec_im{l}")
        mix_w, mix_b = m.view(f"mix_w{l}"), m.view(f"mix_b{l}")
        gs, gh = m.view(f"gate_scale{l}"), m.view(f"gate_shift{l}")
        coef = [[sum(h[w][j] * np.exp(-2j * np.pi * k * j / per) for j in range(per))
                 for k in range(a.n_modes)] for w in range(a.width)]
        new = []
        for o in range(a.width):
            y = [sum(coef[i][k] * (re[k, i, o] + 1j * im[k, i, o]) for i in range(a.width))
                 for k in range(a.n_modes)]
            row = []
            for j in range(n):
                jj = j % per
                s = y[0].real + sum(2.0 * (y[k] * np.exp(2j * np.pi * k * jj / per)).real
                                    for k in range(1, a.n_modes))
                s /= per
                s += sum(mix_w[i, o] * h[i][j] for i in range(a.width)) + mix_b[o]
                sc = 1.0 + sum(tp[k] * gs[k, o] for k in range(GATE_DEGREE + 1))
                sh = sum(tp[k] * gh[k, o] for k in range(GATE_DEGREE + 1))
                row.append(float(gelu(sc * s + sh)))
            new.append(row)
        h = new
    pw, pb = m.view("proj_w"), m.view("proj_b")
    return np.array([[sum(pw[w, o] * h[w][j] for w in range(a.width)) + pb[o]
                      for j in range(n)] for o in range(a.out_channels)])


# -- inputs --------------------------------------------------------------------

def positional_channels(n_points: int) -> np.ndarray:
    w = np.arange(n_points) / (n_points - 1)
    return np.stack([np.sin(2 * np.pi * w), np.cos(2 * np.pi * w)])


def build_inputs(x_t, cond, marginal: bool = False) -> np.ndarray:
    """Stack state channels, the condition channel and two positional
    channels into ``(batch, channels, n)``.  ``marginal`` zeroes the
    condition, giving the unconditioned bridge."""
    x_t = np.asarray(x_t, float)
    if x_t.ndim == 2:
        x_t = x_t[:, None, :]
    cond = np.asarray(cond, float)
    cond = np.broadcast_to(cond.reshape(-1, cond.shape[-1])[:, None, :],
                           (x_t.shape[0], 1, x_t.shape[-1]))
    if marginal:
        cond = np.zeros_like(cond)
    pos = np.broadcast_to(positional_channels(x_t.shape[-1]),
                          (x_t.shape[0], 2, x_t.shape[-1]))
    return np.concatenate([x_t, cond, pos], axis=1)


def input_channels(state_channels: int) -> int:
    return state_channels + 3


# -- objective -------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    """Regression batch: ``t`` per row, model inputs and both targets."""
    t: np.ndarray
    inputs: np.ndarray
    velocity_target: np.ndarray
    denoiser_target: np.ndarray


def make_batch(s: ScheduleSet, t, x0, x1, z, heterogeneous: bool,
               marginal: bool = False) -> Batch:
    """``x0, x1`` are ``(B, n)``; ``z`` is ``(B, n)`` or ``(B, 2, n)`` in
    heterogeneous mode."""
    t = np.asarray(t, float)
    x0 = np.asarray(x0, float)
    cond = x0
    if heterogeneous:
        x0, x1 = embed_pair(x0, x1)
    else:
        x0, x1 = x0[:, None], np.asarray(x1, float)[:, None]
    z = np.asarray(z, float).reshape(x0.shape)
    tt = t[:, None, None]
    x_t = s.alpha(tt) * x0 + s.beta(tt) * x1 + s.gamma(tt) * z
    vel = s.alpha_dot(tt) * x0 + s.beta_dot(tt) * x1
    return Batch(t, build_inputs(x_t, cond, marginal), vel, z)


def loss_and_gradient(m: SpectralOperatorModel, batch: Batch, target_kind: str):
    """Mean over rows and sensors of the channel-summed squared error."""
    if target_kind == "velocity":
        target = batch.velocity_target
    elif target_kind == "denoiser":
        target = batch.denoiser_target
    else:
        raise ValueError(f"unknown target kind {target_kind!r}")
    out, cache = m._forward(batch.t, batch.inputs)
    diff = out - target
    scale = 1.0 / (diff.shape[0] * diff.shape[-1])
    loss = float(np.sum(diff * diff) * scale)
    return loss, m.backward(cache, 2.0 * scale * diff)


# -- optimiser and averaging ---------------------------------------------------

class Adam:
    def __init__(self, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.k = 0

    def step(self, params, grad):
        self.k += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1 ** self.k)
        vh = self.v / (1 - self.beta2 ** self.k)
        params -= self.lr * mh / (np.sqrt(vh) + self.eps)


def ema_decay(half_life: float) -> float:
    return 2.0 ** (-1.0 / half_life)


def ema_update(ema, params, decay):
    ema *= decay
    ema += (1.0 - decay) * params


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    total_steps: int = 20000
    ema_half_life: float = 1000.0
    seed: int = 0
    w_phi: float = 1.0
    w_eta: float = 1.0
    log_every: int = 1000

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 1 and total_steps >= 0")
        if not (self.learning_rate > 0 and self.ema_half_life > 0):
            raise ValueError("learning_rate and ema_half_life must be positive")
        if self.w_phi != 1.0 or self.w_eta != 1.0:
            raise ValueError("loss weights are fixed to 1")


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass
class TrainResult:
    velocity: SpectralOperatorModel
    denoiser: SpectralOperatorModel
    velocity_ema: SpectralOperatorModel
    denoiser_ema: SpectralOperatorModel
    loss_phi: np.ndarray = field(repr=False)
    loss_eta: np.ndarray = field(repr=False)


def train(models, pairs, cfg: TrainConfig, s: ScheduleSet, noise,
          heterogeneous: bool = True, marginal: bool = False) -> TrainResult:
    """Fit ``(velocity, denoiser)`` on ``pairs`` of shape ``(N, 2, n)``
    (channel 0 source, channel 1 target).

    ``noise`` is a :class:`~.gaussian_field.GaussianField` on the data grid.
    Models are updated in place; EMA copies are returned alongside.
    """
    vel, den = models
    pairs = np.asarray(pairs, float)
    if pairs.shape[0] == 0:
        raise ValueError("empty dataset")
    n_pts = pairs.shape[-1]
    rng = np.random.default_rng(cfg.seed)
    opt_v = Adam(vel.n_params, cfg.learning_rate)
    opt_d = Adam(den.n_params, cfg.learning_rate)
    ema_v, ema_d = vel.params.copy(), den.params.copy()
    decay = ema_decay(cfg.ema_half_life)
    n_state = 2 if heterogeneous else 1
    trace_v = np.empty(cfg.total_steps)
    trace_d = np.empty(cfg.total_steps)
    for step in range(cfg.total_steps):
        idx = rng.integers(0, pairs.shape[0], cfg.batch_size)
        t = rng.uniform(0.0, 1.0, cfg.batch_size)
        xi = rng.standard_normal((cfg.batch_size, n_state, n_pts))
        z = xi @ noise.factor.T
        batch = make_batch(s, t, pairs[idx, 0], pairs[idx, 1], z, heterogeneous, marginal)
        lv, gv = loss_and_gradient(vel, batch, "velocity")
        ld, gd = loss_and_gradient(den, batch, "denoiser")
        if not (math.isfinite(lv) and math.isfinite(ld)):
            recent = trace_v[max(0, step - 5):step]
            raise TrainingDivergedError(
                f"non-finite loss at step {step}: loss_phi={lv}, loss_eta={ld}; "
                f"previous loss_phi values {recent.tolist()}")
        opt_v.step(vel.params, gv)
        opt_d.step(den.params, gd)
        ema_update(ema_v, vel.params, decay)
        ema_update(ema_d, den.params, decay)
        trace_v[step], trace_d[step] = lv, ld
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d  loss_phi %.5g  loss_eta %.5g", step + 1,
                     trace_v[step + 1 - cfg.log_every:step + 1].mean(),
                     trace_d[step + 1 - cfg.log_every:step + 1].mean())
    return TrainResult(vel, den, SpectralOperatorModel(vel.arch, ema_v),
                       SpectralOperatorModel(den.arch, ema_d), trace_v, trace_d)


# -- learned drift ---------------------------------------------------------------

class LearnedDrift:
    """Velocity/denoiser pair exposed as ``fields(t, x0, x) -> (phi, eta)``.

    ``x0`` is the raw condition ``(P, n)``; ``x`` is the state, ``(P, n)`` in
    homogeneous mode or ``(P, 2, n)`` in the product space.
    """

    def __init__(self, velocity, denoiser, marginal=False, chunk=4096):
        self.velocity = velocity
        self.denoiser = denoiser
        self.marginal = marginal
        self.chunk = chunk

    def fields(self, t, x0, x):
        x = np.asarray(x, float)
        flat = x.ndim == 2
        inp = build_inputs(x, x0, self.marginal)
        phi = np.empty((inp.shape[0], self.velocity.arch.out_channels, inp.shape[-1]))
        eta = np.empty_like(phi)
        for lo in range(0, inp.shape[0], self.chunk):
            sl = slice(lo, lo + self.chunk)
            tt = np.broadcast_to(np.asarray(t, float), (inp.shape[0],))[sl]
            phi[sl] = self.velocity.forward(tt, inp[sl])
            eta[sl] = self.denoiser.forward(tt, inp[sl])
        if flat:
            return phi[:, 0], eta[:, 0]
        return phi, eta


# -- diagnostics against the Gaussian oracle -------------------------------------

@dataclass(frozen=True)
class Decomposition:
    loss: float            # regression loss against the raw target
    excess: float          # loss against the oracle field
    constant: float        # loss - excess
    stderr: float          # standard error of the constant estimate


def loss_decomposition_check(m: SpectralOperatorModel, coupling, s: ScheduleSet,
                             target_kind: str, n_samples: int, seed: int,
                             chunk: int = 5000) -> Decomposition:
    """Estimate ``L``, ``E`` and ``L - E`` on a homogeneous Gaussian coupling.

    The same ``seed`` gives the same ``(t, x0, x1, z)`` draws for every model
    (common random numbers).
    """
    rng = np.random.default_rng(seed)
    diffs = []
    ls, es = 0.0, 0.0
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        t = rng.uniform(0.0, 1.0, k)
        x0, x1, z = coupling.sample(rng, k)
        batch = make_batch(s, t, x0, x1, z, heterogeneous=False)
        x_t = batch.inputs[:, 0]
        e1, eta = coupling.posterior_batch(s, t, x0, x_t)
        if target_kind == "velocity":
            target = batch.velocity_target[:, 0]
            oracle = s.alpha_dot(t)[:, None] * x0 + s.beta_dot(t)[:, None] * e1
        else:
            target = batch.denoiser_target[:, 0]
            oracle = eta
        out = m.forward(t, batch.inputs)[:, 0]
        l_i = np.mean((out - target) ** 2, axis=-1)
        e_i = np.mean((out - oracle) ** 2, axis=-1)
        ls += l_i.sum()
        es += e_i.sum()
        diffs.append(l_i - e_i)
        done += k
    d = np.concatenate(diffs)
    return Decomposition(ls / n_samples, es / n_samples, float(d.mean()),
                         float(d.std(ddof=1) / math.sqrt(n_samples)))


def field_errors(learned: LearnedDrift, coupling, s: ScheduleSet, times, n_per_time,
                 seed: int):
    """Per-time mean squared errors ``A(t)`` (velocity) and ``B(t)``
    (denoiser) of a learned pair against the oracle, homogeneous mode."""
    rng = np.random.default_rng(seed)
    a_err, b_err = [], []
    for t in times:
        x0, x1, z = coupling.sample(rng, n_per_time)
        x = s.alpha(t) * x0 + s.beta(t) * x1 + s.gamma(t) * z
        phi_o, eta_o = coupling.fields(s, float(t), x0, x)
        phi, eta = learned.fields(float(t), x0, x)
        a_err.append(float(np.mean(np.mean((phi - phi_o) ** 2, axis=-1))))
        b_err.append(float(np.mean(np.mean((eta - eta_o) ** 2, axis=-1))))
    return np.array(a_err), np.array(b_err)


# -- checkpoints -------------------------------------------------------------------

def write_checkpoint(path, m: SpectralOperatorModel, ema=None) -> None:
    a = m.arch
    flags = 1 if ema is not None else 0
    header = np.array([CHECKPOINT_SCHEMA, a.n_modes, a.width, a.n_layers,
                       a.in_channels, a.out_channels, m.n_params, flags], dtype="<i8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.asarray(m.params, dtype="<f8").tobytes())
        if ema is not None:
            ema_p = ema.params if isinstance(ema, SpectralOperatorModel) else ema
            fh.write(np.asarray(ema_p, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Return ``(model, ema_model_or_None)``."""
    raw = Path(path).read_bytes()
    header = np.frombuffer(raw[:64], dtype="<i8")
    if header.size != 8 or header[0] != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: not a schema-{CHECKPOINT_SCHEMA} checkpoint")
    _, modes, width, layers, c_in, c_out, n_par, flags = (int(v) for v in header)
    arch = Architecture(c_in, c_out, modes, width, layers)
    if arch.n_params() != n_par:
        raise ValueError(f"{path}: header parameter count disagrees with architecture")
    body = np.frombuffer(raw[64:], dtype="<f8")
    expect = n_par * (2 if flags & 1 else 1)
    if body.size != expect:
        raise ValueError(f"{path}: expected {expect} values, found {body.size}")
    model = SpectralOperatorModel(arch, body[:n_par])
    ema = SpectralOperatorModel(arch, body[n_par:]) if flags & 1 else None
    return model, ema
