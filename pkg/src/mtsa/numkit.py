"""Dense matrix kernels, RNG, initialisers and allocation accounting.

Matrices are plain ``numpy.ndarray`` values.  Kernels operate on the last two
axes, so a stack of matrices with leading batch axes is accepted wherever a
single matrix is.  Every array a kernel creates can be reported to an
:class:`AllocMeter`, which tracks how many float elements are live.
"""

from __future__ import annotations

import math
import threading
import weakref
from typing import Optional

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

ACTIVATIONS = ("relu", "elu", "tanh", "sigmoid", "log_sigmoid", "identity")


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ConfigError(ValueError):
    pass


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            dtype = DTYPES[dtype]
        except KeyError:
            raise ConfigError(f"unknown dtype {dtype!r}") from None
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {dt}")
    return dt


class AllocMeter:
    """Counts live and peak float elements allocated through the kernels.

    Release is driven by ``weakref.finalize`` so an array stops counting as
    soon as CPython frees it.  Safe to share between threads.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._generation = 0
        self.current_floats = 0
        self.peak_floats = 0

    def reset(self) -> None:
        with self._lock:
            self._generation += 1
            self.current_floats = 0
            self.peak_floats = 0

    def track(self, arr: np.ndarray) -> np.ndarray:
        size = int(arr.size)
        with self._lock:
            gen = self._generation
            self.current_floats += size
            if self.current_floats > self.peak_floats:
                self.peak_floats = self.current_floats
        weakref.finalize(arr, self._release, size, gen)
        return arr

    def _release(self, size: int, gen: int) -> None:
        with self._lock:
            # arrays created before a reset are not counted after it
            if gen == self._generation:
                self.current_floats -= size

    def __repr__(self):
        return f"AllocMeter(current_floats={self.current_floats}, peak_floats={self.peak_floats})"


def _track(out: np.ndarray, meter: Optional[AllocMeter]) -> np.ndarray:
    if meter is not None:
        meter.track(out)
    return out


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; the stream depends only on ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def zeros(rows: int, cols: int, dtype="f64", meter: Optional[AllocMeter] = None) -> np.ndarray:
    return _track(np.zeros((rows, cols), dtype=resolve_dtype(dtype)), meter)


def glorot_init(rows: int, cols: int, rng: np.random.Generator, dtype="f64",
                meter: Optional[AllocMeter] = None) -> np.ndarray:
    """Uniform Glorot initialisation on ``[-b, b]`` with ``b = sqrt(6/(rows+cols))``."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"glorot_init needs positive shape, got {rows}x{cols}")
    bound = math.sqrt(6.0 / (rows + cols))
    out = rng.uniform(-bound, bound, size=(rows, cols)).astype(resolve_dtype(dtype))
    return _track(out, meter)


def transpose(a: np.ndarray) -> np.ndarray:
    # a view, so nothing is allocated
    return np.swapaxes(a, -1, -2)


def matmul(a: np.ndarray, b: np.ndarray, meter: Optional[AllocMeter] = None) -> np.ndarray:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if np.isneginf(a).any() or np.isneginf(b).any():
        raise NumericError("matmul operand contains -inf")
    return _track(np.matmul(a, b), meter)


def _check_binary(a, b, broadcast):
    if broadcast:
        try:
            np.broadcast_shapes(np.shape(a), np.shape(b))
        except ValueError:
            raise DimensionError(f"cannot broadcast {np.shape(a)} with {np.shape(b)}") from None
    elif np.shape(a) != np.shape(b):
        raise DimensionError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def exp(a: np.ndarray, meter: Optional[AllocMeter] = None) -> np.ndarray:
    # numpy already maps -inf to exactly 0
    with np.errstate(over="ignore"):
        return _track(np.exp(a), meter)


def elementwise(op: str, a: np.ndarray, b: Optional[np.ndarray] = None, *,
                eps: Optional[float] = None, broadcast: bool = False,
                meter: Optional[AllocMeter] = None) -> np.ndarray:
    """Entrywise ``add``, ``sub``, ``mul``, ``div`` or ``exp``.

    Binary operands must share a shape unless ``broadcast`` is set (used for
    bias columns).  ``div`` raises on a zero denominator unless ``eps`` is
    given, in which case it computes ``a / (b + eps)`` with 0 wherever
    ``b + eps`` is exactly 0.
    """
    if op == "exp":
        return exp(a, meter)
    if b is None:
        raise DimensionError(f"{op} needs two operands")
    _check_binary(a, b, broadcast)
    if op == "add":
        out = np.add(a, b)
    elif op == "sub":
        out = np.subtract(a, b)
    elif op == "mul":
        out = np.multiply(a, b)
    elif op == "div":
        if eps is None:
            if np.any(b == 0):
                raise NumericError("division by zero without stabilisation")
            out = np.divide(a, b)
        else:
            out = safe_divide(a, b, eps)
    else:
        raise ConfigError(f"unknown elementwise op {op!r}")
    return _track(out, meter)


def safe_divide(a, b, eps: float = 0.0) -> np.ndarray:
    d = np.add(b, eps)
    shape = np.broadcast_shapes(np.shape(a), np.shape(d))
    out = np.zeros(shape, dtype=np.result_type(a, d))
    return np.divide(a, d, out=out, where=d != 0)


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    # -softplus(-x), never log of an underflowed sigmoid; NaN passes through
    with np.errstate(invalid="ignore"):
        return -np.logaddexp(0.0, -x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(name: str, x: np.ndarray, meter: Optional[AllocMeter] = None) -> np.ndarray:
    if name == "relu":
        out = np.maximum(x, 0)
    elif name == "elu":
        out = np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
    elif name == "tanh":
        out = np.tanh(x)
    elif name == "sigmoid":
        out = sigmoid(x)
    elif name == "log_sigmoid":
        out = log_sigmoid(x)
    elif name == "identity":
        out = x.copy()
    else:
        raise ConfigError(f"unknown activation {name!r}")
    return _track(out.astype(x.dtype, copy=False), meter)


def activation_grad(name: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Derivative of ``activation(name, x)`` given input ``x`` and output ``y``."""
    if name == "relu":
        return (x > 0).astype(x.dtype)
    if name == "elu":
        return np.where(x > 0, 1.0, y + 1.0).astype(x.dtype)
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "log_sigmoid":
        return sigmoid(-x)
    if name == "identity":
        return np.ones_like(x)
    raise ConfigError(f"unknown activation {name!r}")


def column_softmax(m: np.ndarray, meter: Optional[AllocMeter] = None) -> np.ndarray:
    """Softmax down each column (axis -2); all ``-inf`` columns become zeros."""
    if np.isnan(m).any():
        raise NumericError("NaN in softmax input")
    top = np.max(m, axis=-2, keepdims=True)
    top = np.where(np.isneginf(top), 0.0, top).astype(m.dtype, copy=False)
    e = np.exp(m - top)
    denom = np.sum(e, axis=-2, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    return _track(out, meter)


def masked_max(a: np.ndarray, axis: int, where: Optional[np.ndarray] = None) -> np.ndarray:
    """Max along ``axis`` over allowed entries; 0 where nothing is allowed."""
    allowed = np.isfinite(a) if where is None else (where != 0) & np.isfinite(a)
    top = np.max(a, axis=axis, keepdims=True, where=allowed, initial=-np.inf)
    return np.where(np.isneginf(top), 0.0, top).astype(a.dtype, copy=False)


class Kernel:
    """Binds a dtype and an optional meter to the kernel functions.

    The attention fast path is written against this small method set; the
    reverse-mode :class:`mtsa.grad.Tape` exposes the same methods, so one
    implementation serves both plain evaluation and differentiation.
    """

    def __init__(self, meter: Optional[AllocMeter] = None, dtype="f64"):
        self.meter = meter
        self.dtype = resolve_dtype(dtype)

    def const(self, a):
        return np.asarray(a, dtype=self.dtype)

    def matmul(self, a, b):
        return matmul(a, b, self.meter)

    def add(self, a, b):
        return elementwise("add", a, b, broadcast=True, meter=self.meter)

    def sub(self, a, b):
        return elementwise("sub", a, b, broadcast=True, meter=self.meter)

    def mul(self, a, b):
        return elementwise("mul", a, b, broadcast=True, meter=self.meter)

    def div(self, a, b, eps=None):
        return elementwise("div", a, b, eps=eps, broadcast=True, meter=self.meter)

    def scale(self, a, c):
        return _track(np.multiply(a, a.dtype.type(c)), self.meter)

    def exp(self, a):
        return exp(a, self.meter)

    def activation(self, name, a):
        return activation(name, a, self.meter)

    def transpose(self, a):
        return transpose(a)

    def shift_max(self, a, axis, where=None):
        return _track(np.subtract(a, masked_max(a, axis, where)), self.meter)

    def concat_rows(self, parts):
        return _track(np.concatenate(parts, axis=-2), self.meter)

    def column_softmax(self, a):
        return column_softmax(a, self.meter)

    def sum_cols(self, a):
        return _track(np.sum(a, axis=-1, keepdims=True), self.meter)

    def value(self, a):
        return a

    def embed(self, table, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[1]):
            raise IndexError(f"token id out of range [0, {table.shape[1]})")
        return _track(np.moveaxis(table[:, ids], 0, -2), self.meter)

    def softmax_xent(self, logits, labels):
        z = logits[..., 0]
        z = z - z.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return -np.mean(np.take_along_axis(logp, np.asarray(labels)[..., None], axis=-1))

    def mse(self, pred, target):
        return np.mean((pred - target) ** 2)

    def sum(self, a):
        return np.sum(a)

    def mean(self, a):
        return np.mean(a)
