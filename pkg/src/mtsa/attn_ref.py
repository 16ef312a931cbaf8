"""Reference attention mechanisms, written for clarity rather than speed.

Contains the classic compatibility functions, scaled dot-product and
multi-head attention, masked (directional) self-attention, source2token
pooling, and the naive tensorised self-attention that materialises the full
``d_h x n x n`` score tensor.  The naive path is the oracle the matrix-only
fast path in :mod:`mtsa.mtsa_fast` is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import numkit as nk
from .masks import PositionalMask, make_mask

SCALE_CHOICES = ("log_sigmoid", "identity")


@dataclass(frozen=True)
class ScaleFns:
    sigma_t: str = "log_sigmoid"
    sigma_s: str = "identity"
    sigma_m: str = "relu"

    def __post_init__(self):
        if self.sigma_t not in SCALE_CHOICES or self.sigma_s not in SCALE_CHOICES:
            raise nk.ConfigError(f"scale functions must be one of {SCALE_CHOICES}")
        if self.sigma_m not in nk.ACTIVATIONS:
            raise nk.ConfigError(f"unknown activation {self.sigma_m!r}")


@dataclass
class TsaParams:
    """Weights of one tensorised self-attention block. Biases are column vectors."""

    W_t1: np.ndarray
    W_t2: np.ndarray
    W_t3: np.ndarray
    W_s1: np.ndarray
    b_s1: np.ndarray
    W_s2: np.ndarray
    b_s2: np.ndarray

    def __post_init__(self):
        d_i, d_e = self.W_t1.shape
        d_h = self.W_t3.shape[0]
        d_a = self.W_s1.shape[0]
        expected = {
            "W_t1": (d_i, d_e), "W_t2": (d_i, d_e), "W_t3": (d_h, d_e),
            "W_s1": (d_a, d_i), "b_s1": (d_a, 1), "W_s2": (d_h, d_a), "b_s2": (d_h, 1),
        }
        for name, shape in expected.items():
            value = getattr(self, name)
            got = tuple(value.shape) if hasattr(value, "shape") else np.shape(value)
            if got != shape:
                raise nk.DimensionError(f"{name} has shape {got}, expected {shape}")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """``(d_e, d_i, d_h, d_a)``"""
        return (self.W_t1.shape[1], self.W_t1.shape[0], self.W_t3.shape[0], self.W_s1.shape[0])

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names()}

    @classmethod
    def init(cls, d_e: int, d_i: int, d_h: int, d_a: int, rng: np.random.Generator,
             dtype="f64") -> "TsaParams":
        g = lambda r, c: nk.glorot_init(r, c, rng, dtype)  # noqa: E731
        return cls(W_t1=g(d_i, d_e), W_t2=g(d_i, d_e), W_t3=g(d_h, d_e),
                   W_s1=g(d_a, d_i), b_s1=nk.zeros(d_a, 1, dtype),
                   W_s2=g(d_h, d_a), b_s2=nk.zeros(d_h, 1, dtype))


@dataclass
class CompatParams:
    """Parameters of a compatibility function.

    ``dot``: W_d1, W_d2.  ``additive``: W_a, w, b_a, b.  ``multidim``: W_a, W,
    b_a, b.  ``masked``: W_m, b_m, c.
    """

    variant: str
    W_d1: Optional[np.ndarray] = None
    W_d2: Optional[np.ndarray] = None
    W_a: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    W: Optional[np.ndarray] = None
    b_a: Optional[np.ndarray] = None
    b: float | np.ndarray = 0.0
    W_m: Optional[np.ndarray] = None
    b_m: Optional[np.ndarray] = None
    c: float = 5.0
    sigma_a: str = "tanh"

    def __post_init__(self):
        required = {
            "dot": ("W_d1", "W_d2"),
            "additive": ("W_a", "w", "b_a"),
            "multidim": ("W_a", "W", "b_a"),
            "masked": ("W_m", "b_m"),
        }
        if self.variant not in required:
            raise nk.ConfigError(f"unknown compatibility variant {self.variant!r}")
        missing = [k for k in required[self.variant] if getattr(self, k) is None]
        if missing:
            raise nk.ConfigError(f"{self.variant} compatibility needs {missing}")
        if self.c <= 0:
            raise nk.ConfigError("c must be positive")
        if self.variant == "masked":
            d_e = self.W_m.shape[0]
            if self.W_m.shape != (d_e, 2 * d_e):
                raise nk.DimensionError(f"W_m must be d_e x 2d_e, got {self.W_m.shape}")


def _softmax_vec(scores: np.ndarray) -> np.ndarray:
    return nk.column_softmax(np.asarray(scores, dtype=float).reshape(-1, 1))[:, 0]


def attend(scores: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Softmax the scores and return the weighted sum of the value columns."""
    scores = np.asarray(scores)
    if scores.ndim != 1 or values.shape[1] != scores.shape[0]:
        raise nk.DimensionError(f"{scores.shape[0]} scores for {values.shape[1]} values")
    return values @ _softmax_vec(scores)


def compat_score(params: CompatParams, x_i: np.ndarray, q: Optional[np.ndarray] = None,
                 M_ij: Optional[float] = None):
    """Alignment score of token ``x_i`` against query ``q``.

    For the ``masked`` variant ``q`` is the query token ``x_j`` and ``M_ij``
    is required; it returns one score per feature.
    """
    x_i = np.asarray(x_i, dtype=float)
    if params.variant == "dot":
        return float((params.W_d1 @ x_i) @ (params.W_d2 @ q))
    if params.variant in ("additive", "multidim"):
        pair = np.concatenate([x_i, np.asarray(q, dtype=float)])
        if params.W_a.shape[1] != pair.shape[0]:
            raise nk.DimensionError(f"W_a expects {params.W_a.shape[1]} inputs, got {pair.shape[0]}")
        hidden = nk.activation(params.sigma_a, params.W_a @ pair + np.ravel(params.b_a))
        if params.variant == "additive":
            return float(np.ravel(params.w) @ hidden + params.b)
        return params.W @ hidden + params.b
    # masked
    if M_ij is None:
        raise nk.ConfigError("masked compatibility needs the mask entry M_ij")
    pair = np.concatenate([x_i, np.asarray(q, dtype=float)])
    if params.W_m.shape[1] != pair.shape[0]:
        raise nk.DimensionError(f"W_m expects {params.W_m.shape[1]} inputs, got {pair.shape[0]}")
    c = params.c
    return c * np.tanh((params.W_m @ pair + np.ravel(params.b_m)) / c) + M_ij


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                         mask: Optional[np.ndarray] = None) -> np.ndarray:
    """``v @ softmax_keys(k^T q / sqrt(d_i))``; ``mask`` is an additive key x query matrix."""
    if q.shape[-2] != k.shape[-2] or k.shape[-1] != v.shape[-1]:
        raise nk.DimensionError(f"incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    scores = nk.transpose(k) @ q / math.sqrt(q.shape[-2])
    if mask is not None:
        scores = scores + mask
    return v @ nk.column_softmax(scores)


def multi_head_attention(q, k, v, Wq: list, Wk: list, Wv: list, W_o: np.ndarray,
                         meter: Optional[nk.AllocMeter] = None) -> np.ndarray:
    if not (len(Wq) == len(Wk) == len(Wv)) or not Wq:
        raise nk.DimensionError("need the same number (>= 1) of q/k/v projections")
    heads = []
    for wq, wk, wv in zip(Wq, Wk, Wv):
        qc = nk.matmul(wq, q, meter)
        kc = nk.matmul(wk, k, meter)
        vc = nk.matmul(wv, v, meter)
        scores = nk.matmul(nk.transpose(kc), qc, meter)
        scores = nk._track(scores / math.sqrt(qc.shape[-2]), meter)
        heads.append(nk.matmul(vc, nk.column_softmax(scores, meter), meter))
    stacked = nk._track(np.concatenate(heads, axis=-2), meter)
    if W_o.shape[1] != stacked.shape[-2]:
        raise nk.DimensionError(f"W_o is {W_o.shape}, heads stack to {stacked.shape[-2]} rows")
    return nk.matmul(W_o, stacked, meter)


def masked_self_attention(x: np.ndarray, mask: PositionalMask, params: CompatParams) -> np.ndarray:
    """Multi-dimensional masked self-attention over the columns of ``x``."""
    d_e, n = x.shape
    if mask.n != n:
        raise nk.DimensionError(f"mask is {mask.n}x{mask.n} for {n} tokens")
    if params.variant != "masked" or params.W_m.shape[0] != d_e:
        raise nk.DimensionError("masked_self_attention needs masked params matching d_e")
    W_key, W_query = params.W_m[:, :d_e], params.W_m[:, d_e:]
    pre = (W_key @ x)[:, :, None] + (W_query @ x)[:, None, :] + np.reshape(params.b_m, (d_e, 1, 1))
    c = params.c
    scores = c * np.tanh(pre / c) + mask.additive  # [l, i, j]
    probs = nk.column_softmax(scores)
    return np.einsum("lij,li->lj", probs, x)


def disa(x: np.ndarray, params_fw: CompatParams, params_bw: CompatParams) -> np.ndarray:
    n = x.shape[1]
    fw = masked_self_attention(x, make_mask("forward", n), params_fw)
    bw = masked_self_attention(x, make_mask("backward", n), params_bw)
    return np.concatenate([fw, bw], axis=0)


def source2token_pool(x: np.ndarray, W_s1, b_s1, W_s2, b_s2, sigma_m: str = "relu") -> np.ndarray:
    """Feature-wise source2token attention pooling of ``x`` (d x n) to a d-vector."""
    if W_s1.shape[1] != x.shape[-2] or W_s2.shape[0] != x.shape[-2]:
        raise nk.DimensionError(f"pooling weights do not match input of {x.shape[-2]} features")
    scores = W_s2 @ nk.activation(sigma_m, W_s1 @ x + b_s1) + b_s2
    weights = nk.transpose(nk.column_softmax(nk.transpose(scores)))
    return np.sum(weights * x, axis=-1)


def tsa_scores(x: np.ndarray, mask: PositionalMask, params: TsaParams, fns: ScaleFns,
               meter: Optional[nk.AllocMeter] = None):
    """Return ``(scores, v)`` with ``scores[..., l, i, j]`` the full tensorised alignment."""
    d_e, d_i, d_h, d_a = params.dims
    n = x.shape[-1]
    if x.shape[-2] != d_e:
        raise nk.DimensionError(f"input has {x.shape[-2]} features, params expect {d_e}")
    if mask.n != n:
        raise nk.DimensionError(f"mask is {mask.n}x{mask.n} for {n} tokens")
    q = nk.matmul(params.W_t1, x, meter)
    k = nk.matmul(params.W_t2, x, meter)
    v = nk.matmul(params.W_t3, x, meter)
    token2token = nk.matmul(nk.transpose(k), q, meter) / math.sqrt(d_i)
    source2token = params.W_s2 @ nk.activation(fns.sigma_m, params.W_s1 @ k + params.b_s1) + params.b_s2
    t = nk.activation(fns.sigma_t, token2token)
    s = nk.activation(fns.sigma_s, source2token)
    scores = t[..., None, :, :] + s[..., :, :, None] + mask.additive.astype(x.dtype, copy=False)
    if np.isnan(scores).any():
        raise nk.NumericError("NaN alignment scores")
    return nk._track(scores, meter), v


def tsa_naive(x: np.ndarray, mask: PositionalMask, params: TsaParams, fns: ScaleFns,
              meter: Optional[nk.AllocMeter] = None, return_probs: bool = False):
    """Tensorised self-attention computed by materialising every score.

    ``x`` is ``d_e x n`` (optionally with leading batch axes).  Returns the
    ``d_h x n`` output, plus the ``d_h x n x n`` probability tensor indexed
    ``[l, i, j]`` when ``return_probs`` is set.
    """
    scores, v = tsa_scores(x, mask, params, fns, meter)
    probs = nk.column_softmax(scores, meter)
    del scores
    out = nk._track(np.einsum("...lij,...li->...lj", probs, v), meter)
    if return_probs:
        return out, probs
    return out
