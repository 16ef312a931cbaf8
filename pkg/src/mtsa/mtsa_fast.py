"""Matrix-only multi-mask tensorised self-attention.

Each head combines a scaled dot-product token2token score matrix ``R`` (n x n)
with a feature-wise source2token score matrix ``S`` (d_h x n).  Because the
softmax of their sum factorises into ``exp(R) * exp(S)``, the normalised
output needs only two ``(d_h x n) @ (n x n)`` products and never builds the
``d_h x n x n`` tensor.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import numkit as nk
from .attn_ref import ScaleFns, TsaParams
from .masks import PositionalMask, make_mask, parse_kind

MAGIC = b"MTSA1"


@dataclass(frozen=True)
class AttentionConfig:
    d_e: int
    d_i: int
    d_h: int
    d_a: int
    h: int = 1
    fns: ScaleFns = field(default_factory=ScaleFns)
    p_ad: float = 1.0
    stabilize: Optional[bool] = None
    eps: float = 0.0
    dtype: str = "f64"
    divisor: str = "di"

    def __post_init__(self):
        for name in ("d_e", "d_i", "d_h", "d_a", "h"):
            if getattr(self, name) < 1:
                raise nk.ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.p_ad <= 1.0:
            raise nk.ConfigError(f"p_ad must lie in (0, 1], got {self.p_ad}")
        if self.divisor not in ("di", "dh"):
            raise nk.ConfigError("divisor must be 'di' or 'dh'")
        nk.resolve_dtype(self.dtype)

    @property
    def use_stabilize(self) -> bool:
        if self.stabilize is not None:
            return self.stabilize
        # log-sigmoid scores are <= 0 already; identity scores are unbounded
        return self.fns.sigma_s == "identity" or self.fns.sigma_t == "identity"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "AttentionConfig":
        data = dict(data)
        data["fns"] = ScaleFns(**data.get("fns", {}))
        return cls(**data)


def default_mask_assignment(h: int) -> list[str]:
    n_fw = (h + 1) // 2
    return ["forward"] * n_fw + ["backward"] * (h - n_fw)


@dataclass
class MtsaParams:
    heads: list
    W_o: np.ndarray
    mask_assignment: list = None

    def __post_init__(self):
        h = len(self.heads)
        if h < 1:
            raise nk.DimensionError("need at least one head")
        if self.mask_assignment is None:
            self.mask_assignment = default_mask_assignment(h)
        if len(self.mask_assignment) != h:
            raise nk.DimensionError(f"{len(self.mask_assignment)} masks for {h} heads")
        for spec in self.mask_assignment:
            parse_kind(spec)
        side = sum(p.dims[2] for p in self.heads)
        if tuple(self.W_o.shape) != (side, side):
            raise nk.DimensionError(f"W_o must be {side}x{side}, got {tuple(self.W_o.shape)}")

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator,
             mask_assignment: Optional[list] = None) -> "MtsaParams":
        heads = [TsaParams.init(cfg.d_e, cfg.d_i, cfg.d_h, cfg.d_a, rng, cfg.dtype)
                 for _ in range(cfg.h)]
        side = cfg.h * cfg.d_h
        return cls(heads, nk.glorot_init(side, side, rng, cfg.dtype), mask_assignment)

    def named(self, prefix: str = "") -> dict:
        """Flat ``{name: array}`` view in declaration order."""
        out = {}
        for c, head in enumerate(self.heads):
            for name, value in head.as_dict().items():
                out[f"{prefix}head{c}.{name}"] = value
        out[f"{prefix}W_o"] = self.W_o
        return out

    @classmethod
    def from_named(cls, flat: dict, h: int, mask_assignment=None, prefix: str = "") -> "MtsaParams":
        heads = [TsaParams(**{name: flat[f"{prefix}head{c}.{name}"] for name in TsaParams.names()})
                 for c in range(h)]
        return cls(heads, flat[f"{prefix}W_o"], list(mask_assignment) if mask_assignment else None)


@dataclass
class DropoutMaskPair:
    mask_X: np.ndarray
    mask_R: np.ndarray
    keep: float


def sample_dropout(cfg: AttentionConfig, n: int, rng: np.random.Generator,
                   batch: tuple = ()) -> DropoutMaskPair:
    """Inverted-dropout masks for the two factors of the output numerator.

    Each entry is kept with probability ``sqrt(p_ad)`` and scaled by
    ``1/sqrt(p_ad)``, so a joint contribution survives with probability p_ad.
    """
    keep = math.sqrt(cfg.p_ad)
    dt = nk.resolve_dtype(cfg.dtype)
    shape_x = tuple(batch) + (cfg.d_h, n)
    shape_r = tuple(batch) + (n, n)
    if keep == 1.0:
        return DropoutMaskPair(np.ones(shape_x, dt), np.ones(shape_r, dt), keep)
    scale = 1.0 / keep
    mask_x = (rng.random(shape_x) < keep) * scale
    mask_r = (rng.random(shape_r) < keep) * scale
    return DropoutMaskPair(mask_x.astype(dt), mask_r.astype(dt), keep)


def tsa_head_fast(x, mask: PositionalMask, params: TsaParams, fns: ScaleFns,
                  dropout: Optional[DropoutMaskPair] = None, *, kernel=None,
                  stabilize: bool = True, eps: float = 0.0, divisor: str = "di"):
    """One head of MTSA without materialising the score tensor.

    ``kernel`` is a :class:`~mtsa.numkit.Kernel` (default: unmetered, dtype of
    ``x``) or a :class:`~mtsa.grad.Tape`.  Returns the ``d_h x n`` output.
    ``eps`` is added to the normaliser; with the default 0 a query that sees
    no key gets an exactly zero column and no other output is perturbed.
    """
    k_ = kernel if kernel is not None else nk.Kernel(dtype=getattr(x, "dtype", "f64"))
    d_e, d_i, d_h, d_a = params.dims
    n = x.shape[-1]
    if x.shape[-2] != d_e:
        raise nk.DimensionError(f"input has {x.shape[-2]} features, params expect {d_e}")
    if mask.n != n:
        raise nk.DimensionError(f"mask is {mask.n}x{mask.n} for {n} tokens")
    dt = k_.dtype

    q = k_.matmul(params.W_t1, x)
    k = k_.matmul(params.W_t2, x)
    v = k_.matmul(params.W_t3, x)

    r = k_.matmul(k_.transpose(k), q)
    r = k_.scale(r, 1.0 / math.sqrt(d_i if divisor == "di" else d_h))
    del q

    s = k_.add(k_.matmul(params.W_s1, k), params.b_s1)
    s = k_.activation(fns.sigma_m, s)
    s = k_.add(k_.matmul(params.W_s2, s), params.b_s2)
    del k

    # exp(sigma_t(R)) * exp(M), computed as exp(sigma_t(R) + M) so that an
    # overflowing masked score can never turn into inf * 0
    t = k_.activation(fns.sigma_t, r)
    del r
    t = k_.add(t, mask.additive.astype(dt, copy=False))
    if stabilize:
        t = k_.shift_max(t, axis=-2)
    e_r = k_.exp(t)
    del t

    s = k_.activation(fns.sigma_s, s)
    if stabilize:
        s = k_.shift_max(s, axis=-1)
    e_s = k_.exp(s)
    del s
    e_x = k_.mul(v, e_s)
    del v

    if dropout is not None:
        num = k_.matmul(k_.mul(e_x, dropout.mask_X), k_.mul(e_r, dropout.mask_R))
    else:
        num = k_.matmul(e_x, e_r)
    del e_x
    den = k_.matmul(e_s, e_r)
    out = k_.div(num, den, eps)
    if not np.all(np.isfinite(k_.value(out))):
        raise nk.NumericError("non-finite head output; enable stabilisation")
    return out


def normalized_token2token(x, mask: PositionalMask, params: TsaParams, fns: ScaleFns,
                           divisor: str = "di") -> np.ndarray:
    """Columns of ``exp(sigma_t(R)) * exp(M)`` divided by their sums (zero if fully masked)."""
    d_e, d_i, d_h, d_a = params.dims
    q = params.W_t1 @ x
    k = params.W_t2 @ x
    r = nk.transpose(k) @ q / math.sqrt(d_i if divisor == "di" else d_h)
    return nk.column_softmax(nk.activation(fns.sigma_t, r) + mask.additive)


def source2token_scores(x, params: TsaParams, fns: ScaleFns) -> np.ndarray:
    """Scaled source2token scores ``sigma_s(S)`` (d_h x n)."""
    k = params.W_t2 @ x
    s = params.W_s2 @ nk.activation(fns.sigma_m, params.W_s1 @ k + params.b_s1) + params.b_s2
    return nk.activation(fns.sigma_s, s)


def mtsa_forward(x, params: MtsaParams, cfg: AttentionConfig,
                 rng: Optional[np.random.Generator] = None, *, train: bool = False,
                 kernel=None, meter: Optional[nk.AllocMeter] = None,
                 parallel: bool = False, return_heads: bool = False):
    """``W_o @ [H_1; ...; H_h]`` with head ``c`` masked by ``mask_assignment[c]``.

    Attention dropout is applied only when ``train`` is set and ``p_ad < 1``;
    every head then draws from its own stream spawned from ``rng``.
    """
    k_ = kernel if kernel is not None else nk.Kernel(meter=meter, dtype=cfg.dtype)
    n = x.shape[-1]
    h = len(params.heads)
    masks = [make_mask(spec, n, dtype=cfg.dtype) for spec in params.mask_assignment]

    dropouts = [None] * h
    if train and cfg.p_ad < 1.0:
        if rng is None:
            raise nk.ConfigError("attention dropout needs an rng")
        batch = tuple(x.shape[:-2])
        dropouts = [sample_dropout(cfg, n, stream, batch) for stream in rng.spawn(h)]

    def run(c):
        return tsa_head_fast(x, masks[c], params.heads[c], cfg.fns, dropouts[c], kernel=k_,
                             stabilize=cfg.use_stabilize, eps=cfg.eps, divisor=cfg.divisor)

    if parallel and isinstance(k_, nk.Kernel) and h > 1:
        with ThreadPoolExecutor(max_workers=h) as pool:
            heads = list(pool.map(run, range(h)))
    else:
        heads = [run(c) for c in range(h)]
    stacked = heads[0] if h == 1 else k_.concat_rows(heads)
    out = k_.matmul(params.W_o, stacked)
    if return_heads:
        return out, heads
    return out


# -- parameter container -----------------------------------------------------

def save_params(path, params: MtsaParams, cfg: AttentionConfig) -> None:
    """Write the binary container and its ``.json`` sidecar."""
    path = Path(path)
    flat = params.named()
    dt = nk.resolve_dtype(cfg.dtype).newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(flat)))
        for arr in flat.values():
            rows, cols = np.shape(arr)
            fh.write(struct.pack("<II", rows, cols))
        for arr in flat.values():
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes(order="C"))
    sidecar = {"config": cfg.to_json(), "mask_assignment": list(params.mask_assignment),
               "names": list(flat)}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


class ContainerError(ValueError):
    pass


def load_params(path) -> tuple[MtsaParams, AttentionConfig]:
    path = Path(path)
    try:
        meta = json.loads(Path(str(path) + ".json").read_text())
        cfg = AttentionConfig.from_json(meta["config"])
        names = meta["names"]
        blob = path.read_bytes()
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"cannot read parameter files for {path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise ContainerError("bad magic bytes")
    pos = len(MAGIC)
    try:
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shapes = []
        for _ in range(count):
            shapes.append(struct.unpack_from("<II", blob, pos))
            pos += 8
    except struct.error as exc:
        raise ContainerError("truncated shape table") from exc
    if count != len(names):
        raise ContainerError(f"container holds {count} matrices, sidecar names {len(names)}")
    dt = nk.resolve_dtype(cfg.dtype).newbyteorder("<")
    flat = {}
    for name, (rows, cols) in zip(names, shapes):
        nbytes = rows * cols * dt.itemsize
        if pos + nbytes > len(blob):
            raise ContainerError("truncated payload")
        flat[name] = np.frombuffer(blob, dtype=dt, count=rows * cols, offset=pos) \
            .reshape(rows, cols).astype(nk.resolve_dtype(cfg.dtype))
        pos += nbytes
    if pos != len(blob):
        raise ContainerError("trailing bytes after payload")
    try:
        params = MtsaParams.from_named(flat, cfg.h, meta["mask_assignment"])
    except (KeyError, nk.DimensionError) as exc:
        raise ContainerError(f"inconsistent parameters: {exc}") from exc
    return params, cfg
