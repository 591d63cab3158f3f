"""Command-line driver: data generation, training, sampling, evaluation,
the time-change ablation and the Gaussian-oracle verification suite.

Configuration is a flat text file of ``key = value`` lines (``#`` starts a
comment).  Unknown keys are rejected.  Every command writes the fully resolved
configuration next to its outputs as ``resolved.cfg``.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 verification FAIL.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .darcy1d import FORCING_LENGTH_SCALE, DarcySolveError, generate_dataset
from .function_space import Dataset, Grid, batch_relative_l2, read_dataset, write_dataset
from .gaussian_field import FactorizationError, RbfKernel, build_field
from .models import (Architecture, LearnedDrift, SpectralOperatorModel, TrainConfig,
                     TrainingDivergedError, input_channels, read_checkpoint, train,
                     write_checkpoint)
from .schedules import DiffusionParam, DomainError, ScheduleSet, make_time_change, \
    validate_time_change
from .solvers import SCHEMES, NonFiniteStateError, SolverConfig, prediction, \
    sample_trajectory

log = logging.getLogger("hilbert_si")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3

# every accepted key with its default, in the order echoed to resolved.cfg
DEFAULTS = {
    "seed": "0",
    "task": "forward",
    "mode": "ode",
    "paths.train": "data/train.bin",
    "paths.test": "data/test.bin",
    "paths.checkpoint_dir": "runs/checkpoint",
    "paths.output_dir": "runs/output",
    "data.n_train": "2000",
    "data.n_test": "200",
    "data.n_points": "128",
    "data.forcing_length_scale": repr(FORCING_LENGTH_SCALE),
    "noise.length_scale": "0.05",
    "schedule.b": "0.01",
    "diffusion.epsilon": "auto",
    "timechange.family": "auto",
    "model.n_modes": "16",
    "model.width": "32",
    "model.n_layers": "3",
    "train.batch_size": "32",
    "train.learning_rate": "0.001",
    "train.steps": "20000",
    "train.ema_half_life": "1000",
    "train.log_every": "1000",
    "sample.use_ema": "true",
    "solver.scheme": "em2",
    "solver.steps": "100",
    "solver.paths": "1",
    "gaussian.n_points": "32",
    "gaussian.noise_length_scale": "0.05",
    "gaussian.paths": "10000",
    "gaussian.steps": "200",
    "gaussian.heun_steps": "1000",
    "gaussian.decomposition_samples": "100000",
}

INT_KEYS = {"seed", "data.n_train", "data.n_test", "data.n_points", "model.n_modes",
            "model.width", "model.n_layers", "train.batch_size", "train.steps",
            "train.log_every", "solver.steps", "solver.paths", "gaussian.n_points",
            "gaussian.paths", "gaussian.steps", "gaussian.heun_steps",
            "gaussian.decomposition_samples"}
FLOAT_KEYS = {"data.forcing_length_scale", "noise.length_scale", "schedule.b",
              "train.learning_rate", "train.ema_half_life", "gaussian.noise_length_scale"}
CHOICES = {"task": ("forward", "inverse"), "mode": ("ode", "sde"),
           "solver.scheme": SCHEMES, "sample.use_ema": ("true", "false"),
           "timechange.family": ("auto", "identity", "poly_right", "poly_both",
                                 "exp_right", "exp_both")}

# Table-1 row layout: three ODE rows, five SDE rows
ABLATION_ROWS = (("ode", "identity"), ("ode", "poly_both"), ("ode", "exp_both"),
                 ("sde", "identity"), ("sde", "poly_right"), ("sde", "exp_right"),
                 ("sde", "poly_both"), ("sde", "exp_both"))


class UsageError(Exception):
    pass


# -- configuration ---------------------------------------------------------------

def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in DEFAULTS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise UsageError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(key, value):
    try:
        if key in INT_KEYS:
            return int(value)
        if key in FLOAT_KEYS:
            return float(value)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {value!r}") from None
    if key in CHOICES and value not in CHOICES[key]:
        raise UsageError(f"{key}: {value!r} is not one of {', '.join(CHOICES[key])}")
    return value


def resolve_config(path=None, env=None) -> dict:
    """Defaults, then the file, then ``HSI_SEED``; values are typed."""
    env = os.environ if env is None else env
    raw = dict(DEFAULTS)
    base = Path(".")
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        raw.update(parse_config_text(text, str(p)))
        base = p.parent
    if env.get("HSI_SEED"):
        raw["seed"] = env["HSI_SEED"]
    cfg = {k: _convert(k, v) for k, v in raw.items()}
    # relative paths are relative to the config file; the echo stores them
    # absolute so that it can be re-run from anywhere
    for k in ("paths.train", "paths.test", "paths.checkpoint_dir", "paths.output_dir"):
        cfg[k] = str((base / cfg[k]).resolve())
    b = cfg["schedule.b"]
    if not b > 0:
        raise UsageError("schedule.b must be positive")
    try:
        cfg["_epsilon"] = _epsilon(cfg)
    except ValueError as exc:
        raise UsageError(f"diffusion.epsilon: {exc}") from None
    if cfg["timechange.family"] == "auto":
        cfg["_family"] = "poly_both" if cfg["mode"] == "ode" else "poly_right"
    else:
        cfg["_family"] = cfg["timechange.family"]
    return cfg


def _epsilon(cfg) -> DiffusionParam:
    value = cfg["diffusion.epsilon"]
    if value == "auto":
        return DiffusionParam(0.0) if cfg["mode"] == "ode" else DiffusionParam.parse(
            "b/2", cfg["schedule.b"])
    return DiffusionParam.parse(value, cfg["schedule.b"])


def format_config(cfg: dict) -> str:
    lines = [f"# resolved configuration, hilbert_si {__version__}"]
    for k in DEFAULTS:
        v = cfg[k]
        lines.append(f"{k} = {repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"


def echo_config(cfg: dict, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = d / "resolved.cfg"
    out.write_text(format_config(cfg))
    return out


def _fmt(v: float) -> str:
    return f"{v:.6g}"


# -- shared pieces ------------------------------------------------------------------

def _read(path) -> Dataset:
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"dataset not found: {path}") from None


def _task_view(ds: Dataset, task: str) -> Dataset:
    """Channel 0 is the condition, channel 1 the target."""
    return ds.swapped() if task == "inverse" else ds


def _renormalise(ds: Dataset, mean, std) -> np.ndarray:
    phys = ds.denormalized()
    return (phys - np.asarray(mean)[None, :, None]) / np.asarray(std)[None, :, None]


def _write_kv(path, items: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in items.items()))


def _read_kv(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError:
        raise UsageError(f"missing {path}; run 'train' first") from None
    out = {}
    for line in text.splitlines():
        if "=" in line and not line.lstrip().startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_checkpoint(directory, use_ema=True):
    """Returns ``(LearnedDrift, train_meta)``."""
    d = Path(directory)
    meta = _read_kv(d / "train.meta")
    try:
        vel, vel_ema = read_checkpoint(d / "velocity.ckpt")
        den, den_ema = read_checkpoint(d / "denoiser.ckpt")
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint file not found: {exc.filename}") from None
    if use_ema:
        if vel_ema is None or den_ema is None:
            raise UsageError("sample.use_ema = true but the checkpoint has no EMA weights")
        vel, den = vel_ema, den_ema
    return LearnedDrift(vel, den), meta


def run_sampler(cfg, fields, meta, test: Dataset, family: str, eps: DiffusionParam,
                on_nonfinite="raise", keep_states=False):
    """Predict the target channel of ``test`` (task view).  Returns
    ``(pred_normalised (N, n), trajectory)`` in training normalisation; with
    ``solver.paths > 1`` the prediction is the path average."""
    mean = [float(v) for v in meta["mean"].split(",")]
    std = [float(v) for v in meta["std"].split(",")]
    vals = _renormalise(test, mean, std)
    s = ScheduleSet(float(meta["schedule.b"]))
    tc = make_time_change(family)
    report = validate_time_change(tc, eps, s)
    scfg = SolverConfig(cfg["solver.steps"], cfg["solver.scheme"], eps, tc, cfg["seed"], s,
                        raw=not report.valid)
    grid = test.grid
    fld = build_field(RbfKernel(float(meta["noise.length_scale"])), grid)
    k = cfg["solver.paths"]
    if k < 1:
        raise UsageError("solver.paths must be >= 1")
    x0 = np.repeat(vals[:, 0], k, axis=0)
    traj = sample_trajectory(x0, fields, scfg, fld, heterogeneous=True,
                             keep_states=keep_states, on_nonfinite=on_nonfinite)
    pred = prediction(traj, True).reshape(test.n_samples, k, grid.n_points).mean(axis=1)
    return pred, traj, report.valid, mean, std


def rel_l2_percent(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-sample ``100 ||pred - truth|| / ||truth||`` over all channels."""
    p = pred.reshape(pred.shape[0], -1)
    t = truth.reshape(truth.shape[0], -1)
    return 100.0 * batch_relative_l2(p, t)


# -- commands -------------------------------------------------------------------------

def cmd_generate_data(args, cfg) -> int:
    grid = Grid(cfg["data.n_points"])
    ell = cfg["data.forcing_length_scale"]
    for key, n, seed in (("paths.train", cfg["data.n_train"], cfg["seed"]),
                         ("paths.test", cfg["data.n_test"], cfg["seed"] + 1)):
        if n < 1:
            raise UsageError(f"{key}: sample count must be >= 1")
        ds = generate_dataset(n, grid, seed, ell)
        path = Path(cfg[key])
        path.parent.mkdir(parents=True, exist_ok=True)
        write_dataset(path, ds)
        print(f"wrote {path} ({n} samples, {ds.extra['resampled']} resampled)")
    echo_config(cfg, Path(cfg["paths.train"]).parent)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    ds = _task_view(_read(cfg["paths.train"]), cfg["task"])
    if ds.n_channels != 2:
        raise UsageError("training data must have two channels")
    grid = ds.grid
    s = ScheduleSet(cfg["schedule.b"])
    fld = build_field(RbfKernel(cfg["noise.length_scale"]), grid)
    arch = Architecture(input_channels(2), 2, cfg["model.n_modes"], cfg["model.width"],
                        cfg["model.n_layers"])
    try:
        arch.check_grid(grid.n_points)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rng = np.random.default_rng(cfg["seed"])
    vel = SpectralOperatorModel.initialize(arch, rng)
    den = SpectralOperatorModel.initialize(arch, rng)
    tcfg = TrainConfig(cfg["train.batch_size"], cfg["train.learning_rate"],
                       cfg["train.steps"], cfg["train.ema_half_life"], cfg["seed"],
                       log_every=cfg["train.log_every"])
    t0 = time.perf_counter()
    res = train((vel, den), ds.values, tcfg, s, fld)
    out = Path(cfg["paths.checkpoint_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out / "velocity.ckpt", res.velocity, res.velocity_ema)
    write_checkpoint(out / "denoiser.ckpt", res.denoiser, res.denoiser_ema)
    with open(out / "loss_trace.csv", "w") as fh:
        fh.write("step,loss_phi,loss_eta\n")
        for i, (a, b) in enumerate(zip(res.loss_phi, res.loss_eta), 1):
            fh.write(f"{i},{_fmt(a)},{_fmt(b)}\n")
    _write_kv(out / "train.meta", {
        "task": cfg["task"],
        "mean": ",".join(repr(float(v)) for v in ds.mean),
        "std": ",".join(repr(float(v)) for v in ds.std),
        "n_points": grid.n_points,
        "schedule.b": repr(cfg["schedule.b"]),
        "noise.length_scale": repr(cfg["noise.length_scale"]),
        "steps": cfg["train.steps"],
    })
    echo_config(cfg, out)
    tail = slice(max(0, cfg["train.steps"] - 100), None)
    if cfg["train.steps"]:
        print(f"trained {cfg['train.steps']} steps in {time.perf_counter() - t0:.1f}s; "
              f"final loss_phi {_fmt(res.loss_phi[tail].mean())}, "
              f"loss_eta {_fmt(res.loss_eta[tail].mean())}")
    print(f"wrote checkpoints to {out}")
    return EXIT_OK


def cmd_sample(args, cfg) -> int:
    ckpt = args.checkpoint or cfg["paths.checkpoint_dir"]
    fields, meta = load_checkpoint(ckpt, cfg["sample.use_ema"] == "true")
    if meta.get("task") != cfg["task"]:
        raise UsageError(f"checkpoint was trained for task {meta.get('task')!r}, "
                         f"config asks for {cfg['task']!r}")
    test = _task_view(_read(cfg["paths.test"]), cfg["task"])
    pred, traj, valid, mean, std = run_sampler(
        cfg, fields, meta, test, cfg["_family"], cfg["_epsilon"], on_nonfinite="raise",
        keep_states=args.dump_trajectories)
    out = Path(cfg["paths.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    target_channel = 1 if cfg["task"] == "forward" else 0
    ds = Dataset(pred[:, None, :], [mean[1]], [std[1]],
                 {"target_channel": target_channel, "task": cfg["task"],
                  "time_change": cfg["_family"], "epsilon": repr(cfg["_epsilon"].epsilon),
                  "steps": cfg["solver.steps"], "scheme": cfg["solver.scheme"]})
    write_dataset(out / "prediction.bin", ds)
    if args.dump_trajectories:
        np.save(out / "trajectories.npy", traj.states[:, :, 1, :].transpose(1, 0, 2))
        np.save(out / "times.npy", traj.times)
    echo_config(cfg, out)
    print(f"wrote {out / 'prediction.bin'} ({test.n_samples} samples, "
          f"{cfg['_family']}, eps={cfg['_epsilon'].epsilon:g})")
    return EXIT_OK


def _truth_for(pred: Dataset, truth: Dataset) -> np.ndarray:
    if pred.n_channels == truth.n_channels:
        return truth.denormalized()
    ch = pred.extra.get("target_channel")
    if ch is None or pred.n_channels != 1:
        raise UsageError("channel counts differ and the prediction names no target_channel")
    ch = int(ch)
    if not 0 <= ch < truth.n_channels:
        raise UsageError(f"target_channel {ch} out of range")
    return truth.denormalized()[:, ch:ch + 1]


def cmd_evaluate(args, cfg) -> int:
    pred = _read(args.pred)
    truth = _read(args.truth)
    if pred.n_samples != truth.n_samples or pred.values.shape[2] != truth.values.shape[2]:
        raise UsageError("prediction and truth shapes disagree")
    err = rel_l2_percent(pred.denormalized(), _truth_for(pred, truth))
    lines = ["sample,rel_l2_percent"]
    lines += [f"{i},{_fmt(e)}" for i, e in enumerate(err)]
    lines.append(f"mean,{_fmt(float(np.mean(err)))}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"mean relative L2 error: {_fmt(float(np.mean(err)))}%",
          file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def ablation_table(cfg, fields, meta, test: Dataset):
    """Rows ``(mode, family, epsilon, valid, mean %, diverged_step)``."""
    truth = test.denormalized()[:, 1]
    s = ScheduleSet(float(meta["schedule.b"]))
    rows = []
    for mode, fam in ABLATION_ROWS:
        eps = DiffusionParam(0.0) if mode == "ode" else DiffusionParam.parse("b/2", s.b)
        pred, traj, valid, mean, std = run_sampler(cfg, fields, meta, test, fam, eps,
                                                   on_nonfinite="record")
        if traj.finite:
            err = float(np.mean(rel_l2_percent(pred * std[1] + mean[1], truth)))
        else:
            err = math.inf
        rows.append((mode, fam, eps.epsilon, valid, err, traj.diverged_step))
        log.info("ablation %s %s: %s%%", mode, fam, _fmt(err))
    return rows


def format_ablation(rows) -> str:
    lines = ["mode,time_change,epsilon,valid,mean_rel_l2_percent,diverged_step"]
    for mode, fam, eps, valid, err, div in rows:
        lines.append(f"{mode},{fam},{_fmt(eps)},{str(valid).lower()},{_fmt(err)},"
                     f"{'' if div is None else div}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args, cfg) -> int:
    fields, meta = load_checkpoint(args.checkpoint or cfg["paths.checkpoint_dir"],
                                   cfg["sample.use_ema"] == "true")
    test = _task_view(_read(cfg["paths.test"]), meta.get("task", cfg["task"]))
    rows = ablation_table(cfg, fields, meta, test)
    out = Path(cfg["paths.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    text = format_ablation(rows)
    (out / "ablation.csv").write_text(text)
    echo_config(cfg, out)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args, cfg) -> int:
    from .verification import run_suite

    t0 = time.perf_counter()
    checks = run_suite(cfg["gaussian.n_points"], cfg["gaussian.noise_length_scale"],
                       cfg["schedule.b"], cfg["gaussian.paths"], cfg["gaussian.steps"],
                       cfg["gaussian.heun_steps"], cfg["gaussian.decomposition_samples"],
                       cfg["seed"])
    for c in checks:
        print(c.line())
    out = Path(cfg["paths.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "verify.csv", "w") as fh:
        fh.write("check,result,measured,threshold\n")
        for c in checks:
            fh.write(f"\"{c.name}\",{'PASS' if c.passed else 'FAIL'},\"{c.measured}\","
                     f"\"{c.threshold}\"\n")
    echo_config(cfg, out)
    n_fail = sum(not c.passed for c in checks)
    print(f"{len(checks) - n_fail}/{len(checks)} passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_VERIFY if n_fail else EXIT_OK


# -- entry point ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hilbert-si", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value config file")
        sp.set_defaults(fn=fn)
        return sp

    add("generate-data", cmd_generate_data, "generate Darcy train/test pairs")
    add("train", cmd_train, "fit velocity and denoiser models")
    sp = add("sample", cmd_sample, "predict the target channel of the test set")
    sp.add_argument("--checkpoint", help="checkpoint directory (default paths.checkpoint_dir)")
    sp.add_argument("--dump-trajectories", action="store_true",
                    help="also save target-channel trajectories as .npy")
    sp = add("evaluate", cmd_evaluate, "relative L2 error of a prediction file")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp = add("ablate-timechange", cmd_ablate, "time-change ablation table")
    sp.add_argument("--checkpoint", help="checkpoint directory (default paths.checkpoint_dir)")
    add("verify-gaussian", cmd_verify, "oracle property checks on a Gaussian coupling")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config)
        return args.fn(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DarcySolveError, TrainingDivergedError, NonFiniteStateError, FactorizationError,
            DomainError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
