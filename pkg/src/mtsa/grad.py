"""Reverse-mode differentiation over the kernel operations.

A :class:`Tape` records every operation as a :class:`Node` holding its forward
function and vector-Jacobian product.  The tape implements the same method
set as :class:`mtsa.numkit.Kernel`, so model code written against a kernel
can be recorded unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import numkit as nk

GradientSet = dict  # parameter name -> gradient array of the same shape


class DetachedError(ValueError):
    pass


class Node:
    __slots__ = ("value", "parents", "op", "fwd", "vjp", "name", "tape")

    def __init__(self, tape, op, value, parents=(), fwd=None, vjp=None, name=None):
        self.tape = tape
        self.op = op
        self.value = value
        self.parents = parents
        self.fwd = fwd
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.value.shape})"


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    def __init__(self, dtype="f64"):
        self.dtype = nk.resolve_dtype(dtype)
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    # -- leaves -------------------------------------------------------------
    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        node = Node(self, "param", np.asarray(value, dtype=self.dtype), name=name)
        self.nodes.append(node)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        if isinstance(value, Node):
            return value
        node = Node(self, "const", np.asarray(value))
        self.nodes.append(node)
        return node

    def _lift(self, a) -> Node:
        if isinstance(a, Node):
            if a.tape is not self:
                raise DetachedError(f"{a!r} belongs to another tape")
            return a
        return self.const(a)

    def _record(self, op: str, parents: Sequence, fwd: Callable, vjp: Callable) -> Node:
        parents = tuple(self._lift(p) for p in parents)
        value = fwd(*(p.value for p in parents))
        node = Node(self, op, value, parents, fwd, vjp)
        self.nodes.append(node)
        return node

    def value(self, a):
        return a.value if isinstance(a, Node) else a

    # -- linear algebra -----------------------------------------------------
    def matmul(self, a, b):
        def fwd(x, y):
            if x.shape[-1] != y.shape[-2]:
                raise nk.DimensionError(f"matmul shape mismatch: {x.shape} @ {y.shape}")
            return np.matmul(x, y)

        def vjp(g, out, x, y):
            return (_unbroadcast(g @ nk.transpose(y), x.shape),
                    _unbroadcast(nk.transpose(x) @ g, y.shape))
        return self._record("matmul", (a, b), fwd, vjp)

    def transpose(self, a):
        return self._record("transpose", (a,), nk.transpose,
                            lambda g, out, x: (nk.transpose(g),))

    def concat_rows(self, parts):
        def fwd(*xs):
            return np.concatenate(xs, axis=-2)

        def vjp(g, out, *xs):
            edges = np.cumsum([x.shape[-2] for x in xs])[:-1]
            pieces = np.split(g, edges, axis=-2)
            return tuple(_unbroadcast(p, x.shape) for p, x in zip(pieces, xs))
        return self._record("concat_rows", tuple(parts), fwd, vjp)

    # -- elementwise --------------------------------------------------------
    def add(self, a, b):
        return self._record("add", (a, b), np.add,
                            lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))

    def sub(self, a, b):
        return self._record("sub", (a, b), np.subtract,
                            lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))

    def mul(self, a, b):
        return self._record("mul", (a, b), np.multiply,
                            lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    def div(self, a, b, eps=None):
        e = 0.0 if eps is None else eps

        def fwd(x, y):
            if eps is None and np.any(y == 0):
                raise nk.NumericError("division by zero without stabilisation")
            return nk.safe_divide(x, y, e)

        def vjp(g, out, x, y):
            # entries with a zero denominator are the constant 0
            d = y + e
            inv = nk.safe_divide(1.0, d)
            return (_unbroadcast(g * inv, x.shape), _unbroadcast(-g * out * inv, y.shape))
        return self._record("div", (a, b), fwd, vjp)

    def scale(self, a, c):
        return self._record("scale", (a,), lambda x: x * x.dtype.type(c),
                            lambda g, out, x: (g * c,))

    def exp(self, a):
        def fwd(x):
            with np.errstate(over="ignore"):
                return np.exp(x)
        return self._record("exp", (a,), fwd, lambda g, out, x: (g * out,))

    def activation(self, name, a):
        return self._record(f"act:{name}", (a,), lambda x: nk.activation(name, x),
                            lambda g, out, x: (g * nk.activation_grad(name, x, out),))

    def shift_max(self, a, axis, where=None):
        # the subtracted max is held constant; callers use it only where the
        # result is invariant to the shift, so the gradient is exact
        def fwd(x):
            return x - nk.masked_max(x, axis, where)
        return self._record("shift_max", (a,), fwd, lambda g, out, x: (g,))

    # -- reductions and losses ---------------------------------------------
    def column_softmax(self, a):
        def vjp(g, p, x):
            return (p * (g - np.sum(g * p, axis=-2, keepdims=True)),)
        return self._record("column_softmax", (a,), nk.column_softmax, vjp)

    def sum_cols(self, a):
        return self._record("sum_cols", (a,), lambda x: np.sum(x, axis=-1, keepdims=True),
                            lambda g, out, x: (np.broadcast_to(g, x.shape).copy(),))

    def sum(self, a):
        return self._record("sum", (a,), lambda x: np.sum(x),
                            lambda g, out, x: (np.full(x.shape, g, dtype=x.dtype),))

    def mean(self, a):
        return self._record("mean", (a,), lambda x: np.mean(x),
                            lambda g, out, x: (np.full(x.shape, g / x.size, dtype=x.dtype),))

    def mse(self, pred, target):
        def fwd(x, t):
            return np.mean((x - t) ** 2)

        def vjp(g, out, x, t):
            d = 2.0 * g * (x - t) / x.size
            return (d, -d)
        return self._record("mse", (pred, target), fwd, vjp)

    def embed(self, table, ids: np.ndarray):
        """Gather columns of ``table`` (d x V) for integer ``ids`` (..., n) -> (..., d, n)."""
        ids = np.asarray(ids)

        def fwd(t):
            if ids.size and (ids.min() < 0 or ids.max() >= t.shape[1]):
                raise IndexError(f"token id out of range [0, {t.shape[1]})")
            return np.moveaxis(t[:, ids], 0, -2)

        def vjp(g, out, t):
            gt = np.zeros_like(t)
            np.add.at(gt.T, ids, np.moveaxis(g, -2, -1))
            return (gt,)
        return self._record("embed", (table,), fwd, vjp)

    def softmax_xent(self, logits, labels: np.ndarray):
        """Mean cross-entropy of ``logits`` (..., C, 1) against integer labels."""
        labels = np.asarray(labels)

        def _logp(x):
            z = x[..., 0]
            z = z - z.max(axis=-1, keepdims=True)
            return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

        def fwd(x):
            lp = _logp(x)
            return -np.mean(np.take_along_axis(lp, labels[..., None], axis=-1))

        def vjp(g, out, x):
            p = np.exp(_logp(x))
            np.put_along_axis(p, labels[..., None], np.take_along_axis(p, labels[..., None], -1) - 1.0, -1)
            return ((g / labels.size) * p[..., None],)
        return self._record("softmax_xent", (logits,), fwd, vjp)

    # -- replay -------------------------------------------------------------
    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves in recorded order."""
        values: dict[int, np.ndarray] = {}
        out = []
        for node in self.nodes:
            if node.fwd is None:
                val = node.value
            else:
                val = node.fwd(*(values[id(p)] for p in node.parents))
            values[id(node)] = val
            out.append(val)
        return out


def backward(tape: Tape, loss: Node, params: Optional[Sequence[str]] = None) -> GradientSet:
    """Gradients of the scalar ``loss`` with respect to the tape's parameters.

    Every registered parameter (or each name in ``params``) appears in the
    result; parameters the loss does not depend on get zero gradients.
    """
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise DetachedError("loss is not a node of this tape")
    if np.size(loss.value) != 1:
        raise ValueError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    names = list(tape.params) if params is None else list(params)
    for name in names:
        if name not in tape.params:
            raise DetachedError(f"parameter {name!r} is not on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None) if node.vjp is not None else grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        contribs = node.vjp(g, node.value, *(p.value for p in node.parents))
        for parent, c in zip(node.parents, contribs):
            if parent.op == "const":
                continue
            key = id(parent)
            grads[key] = grads[key] + c if key in grads else c
    result = {}
    for name in names:
        leaf = tape.params[name]
        g = grads.get(id(leaf))
        result[name] = np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.value.shape)
    return result


def finite_diff(f: Callable[[dict], float], theta: dict, eps: float = 1e-5) -> GradientSet:
    """Central differences of ``f`` at ``theta`` (a dict of arrays or floats)."""
    theta = {k: np.array(v, dtype=np.float64) for k, v in theta.items()}
    result = {}
    for name, arr in theta.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = f(theta)
            flat[idx] = orig - eps
            lo = f(theta)
            flat[idx] = orig
            gflat[idx] = (hi - lo) / (2 * eps)
        result[name] = g
    return result


def relative_errors(analytic: GradientSet, numeric: GradientSet) -> dict[str, np.ndarray]:
    out = {}
    for name, a in analytic.items():
        n = numeric[name]
        out[name] = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    frac_below_1e6: float
    n_coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def as_dict(self) -> dict:
        return {"max_rel_error": self.max_rel_error, "worst_param": self.worst_param,
                "frac_below_1e-6": self.frac_below_1e6, "n_coords": self.n_coords,
                "tol": self.tol, "passed": self.passed}


def compare(analytic: GradientSet, numeric: GradientSet, tol: float) -> GradCheckReport:
    errs = relative_errors(analytic, numeric)
    worst_name, worst = "", 0.0
    total = below = 0
    for name, e in errs.items():
        if e.size and e.max() >= worst:
            worst_name, worst = name, float(e.max())
        total += e.size
        below += int(np.sum(e <= 1e-6))
    return GradCheckReport(max_rel_error=worst, worst_param=worst_name,
                           frac_below_1e6=below / total if total else 1.0,
                           n_coords=total, tol=tol)


def grad_check(cfg=None, rng: Optional[np.random.Generator] = None, tol: float = 1e-4,
               n: int = 5, batch: int = 2, eps: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode and central-difference gradients on a random
    MTSA + pooling + classifier instance with cross-entropy loss."""
    # local import: toytask depends on this module
    from .mtsa_fast import AttentionConfig
    from .attn_ref import ScaleFns
    from .toytask import ToyModel, model_loss

    if cfg is None:
        cfg = AttentionConfig(d_e=4, d_i=3, d_h=3, d_a=3, h=2,
                              fns=ScaleFns("log_sigmoid", "identity", "elu"))
    if cfg.p_ad != 1.0:
        raise nk.ConfigError("gradient checks need p_ad = 1")
    rng = nk.make_rng(0) if rng is None else rng
    vocab = 6
    model = ToyModel.init(cfg, vocab, rng, pool_sigma=cfg.fns.sigma_m)
    # move biases off zero so their gradients are exercised
    for name, val in model.params.items():
        if name.rsplit(".", 1)[-1].startswith("b"):
            model.params[name] = rng.normal(0, 0.3, size=val.shape)
    tokens = rng.integers(0, vocab, size=(batch, n))
    labels = rng.integers(0, 2, size=batch)

    tape = Tape("f64")
    loss = model_loss(model, tokens, labels, tape=tape)
    analytic = backward(tape, loss)

    def f(theta):
        return float(model_loss(model.with_params(theta), tokens, labels))
    numeric = finite_diff(f, model.params, eps)
    return compare(analytic, numeric, tol)
