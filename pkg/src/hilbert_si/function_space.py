"""Discretised L2 functions on a uniform grid over [0, 1].

Inner products are plain averages over sensors, ``(1/n) sum f(s_j) g(s_j)``,
so the squared norm of a batch of functions is the same quantity as the
mean-squared sensor error used as the training loss.

The module also owns the on-disk dataset format shared by every command:
a raw little-endian float64 array laid out as ``[sample, channel, sensor]``
and a ``key = value`` text sidecar with the same basename and a ``.meta``
suffix.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


class GridMismatchError(ValueError):
    """Raised when two functions live on different grids."""


@dataclass(frozen=True)
class Grid:
    """``n_points`` evenly spaced sensors on [0, 1], endpoints included."""

    n_points: int
    domain_length: float = 1.0

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise ValueError(f"n_points must be an integer >= 2, got {self.n_points}")
        if self.domain_length != 1.0:
            raise ValueError("only the unit interval is supported")

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.n_points) / (self.n_points - 1)

    @property
    def spacing(self) -> float:
        return 1.0 / (self.n_points - 1)


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridFunction:
    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape != (self.grid.n_points,):
            raise ValueError(
                f"expected {self.grid.n_points} values, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("GridFunction values must be finite")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_callable(cls, grid: Grid, fn) -> "GridFunction":
        return cls(grid, fn(grid.points))

    @classmethod
    def zeros(cls, grid: Grid) -> "GridFunction":
        return cls(grid, np.zeros(grid.n_points))

    def __add__(self, other: "GridFunction") -> "GridFunction":
        return axpy(1.0, self, other)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        return axpy(-1.0, other, self)

    def __mul__(self, a: float) -> "GridFunction":
        return GridFunction(self.grid, a * self.values)

    __rmul__ = __mul__


@dataclass(frozen=True)
class PairedFunction:
    """Element of the product space L2 x L2: (condition slot, target slot)."""

    channel0: GridFunction
    channel1: GridFunction

    def __post_init__(self):
        if self.channel0.grid != self.channel1.grid:
            raise GridMismatchError("both channels must share one grid")

    @property
    def grid(self) -> Grid:
        return self.channel0.grid

    @property
    def values(self) -> np.ndarray:
        return np.stack([self.channel0.values, self.channel1.values])

    @classmethod
    def from_array(cls, grid: Grid, arr) -> "PairedFunction":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(GridFunction(grid, arr[0]), GridFunction(grid, arr[1]))

    @classmethod
    def source(cls, x0: GridFunction) -> "PairedFunction":
        """Embed a source function as ``(x0, 0)``."""
        return cls(x0, GridFunction.zeros(x0.grid))

    @classmethod
    def target(cls, x1: GridFunction) -> "PairedFunction":
        """Embed a target function as ``(0, x1)``."""
        return cls(GridFunction.zeros(x1.grid), x1)


def _check_same_grid(f, g):
    if f.grid != g.grid:
        raise GridMismatchError(f"grid mismatch: {f.grid} vs {g.grid}")


def inner_product(f: GridFunction, g: GridFunction) -> float:
    _check_same_grid(f, g)
    return float(np.mean(f.values * g.values))


def norm(f: GridFunction) -> float:
    return float(np.sqrt(inner_product(f, f)))


def relative_l2_error(pred: GridFunction, truth: GridFunction) -> float:
    _check_same_grid(pred, truth)
    denom = norm(truth)
    if denom == 0.0:
        raise ZeroDivisionError("relative error undefined for a zero-norm truth")
    return float(np.sqrt(np.mean((pred.values - truth.values) ** 2)) / denom)


def axpy(a: float, f: GridFunction, g: GridFunction) -> GridFunction:
    _check_same_grid(f, g)
    return GridFunction(f.grid, a * f.values + g.values)


# Array-level versions used on batches; the trailing axis is the sensor axis.

def batch_inner(f: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.mean(f * g, axis=-1)


def batch_sq_norm(f: np.ndarray) -> np.ndarray:
    """Squared norm in L2 (x L2 ...): channels summed, sensors averaged."""
    sq = np.mean(np.asarray(f) ** 2, axis=-1)
    return sq.reshape(sq.shape[0], -1).sum(axis=1) if sq.ndim > 1 else sq


def batch_relative_l2(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-row relative error for arrays shaped ``(n_samples, n_points)``."""
    num = np.sqrt(np.mean((pred - truth) ** 2, axis=-1))
    den = np.sqrt(np.mean(truth ** 2, axis=-1))
    if np.any(den == 0.0):
        raise ZeroDivisionError("relative error undefined for a zero-norm truth")
    return num / den


def normalize_dataset(fs: list[GridFunction]):
    """Standardise with one scalar mean and std pooled over every sensor.

    Returns ``(normalised functions, mean, std)``.
    """
    if not fs:
        raise ValueError("cannot normalise an empty dataset")
    grid = fs[0].grid
    for f in fs:
        _check_same_grid(f, fs[0])
    stacked = np.stack([f.values for f in fs])
    mean, std = pooled_stats(stacked)
    out = [GridFunction(grid, (f.values - mean) / std) for f in fs]
    return out, mean, std


def pooled_stats(values: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(values))
    std = float(np.std(values))
    if not std > 0.0:
        raise ZeroDivisionError("pooled standard deviation is zero")
    return mean, std


# -- dataset files ----------------------------------------------------------

@dataclass
class Dataset:
    """Array of shape ``(n_samples, n_channels, n_points)`` plus the
    per-channel statistics that were used to normalise it."""

    values: np.ndarray
    mean: list[float]
    std: list[float]
    extra: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def grid(self) -> Grid:
        return Grid(self.values.shape[2])

    def denormalized(self) -> np.ndarray:
        m = np.asarray(self.mean)[None, :, None]
        s = np.asarray(self.std)[None, :, None]
        return self.values * s + m

    def swapped(self) -> "Dataset":
        if self.n_channels != 2:
            raise ValueError("swap needs a two-channel dataset")
        return Dataset(self.values[:, ::-1].copy(), self.mean[::-1], self.std[::-1],
                       dict(self.extra))


def meta_path(path) -> Path:
    return Path(path).with_suffix(".meta")


def _fmt_list(xs) -> str:
    return ",".join(repr(float(x)) for x in xs)


def write_dataset(path, ds: Dataset) -> None:
    path = Path(path)
    values = np.ascontiguousarray(ds.values, dtype="<f8")
    if values.ndim != 3:
        raise ValueError("dataset values must be [sample, channel, sensor]")
    n_s, n_c, n_p = values.shape
    if len(ds.mean) != n_c or len(ds.std) != n_c:
        raise ValueError("need one mean/std per channel")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(values.tobytes(order="C"))
    lines = [
        f"schema_version = {SCHEMA_VERSION}",
        f"n_samples = {n_s}",
        f"n_channels = {n_c}",
        f"n_points = {n_p}",
        f"mean = {_fmt_list(ds.mean)}",
        f"std = {_fmt_list(ds.std)}",
    ]
    lines += [f"{k} = {v}" for k, v in sorted(ds.extra.items())]
    meta_path(path).write_text("\n".join(lines) + "\n")


def _parse_meta(text: str) -> dict[str, str]:
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed metadata line: {raw!r}")
        out[key.strip()] = value.strip()
    return out


def read_dataset(path) -> Dataset:
    path = Path(path)
    meta = _parse_meta(meta_path(path).read_text())
    version = int(meta.pop("schema_version"))
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema_version {version}")
    shape = (int(meta.pop("n_samples")), int(meta.pop("n_channels")),
             int(meta.pop("n_points")))
    mean = [float(x) for x in meta.pop("mean").split(",")]
    std = [float(x) for x in meta.pop("std").split(",")]
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    if raw.size != np.prod(shape):
        raise ValueError(f"{path}: expected {np.prod(shape)} values, found {raw.size}")
    values = raw.reshape(shape).astype(np.float64)
    return Dataset(values, mean, std, meta)
