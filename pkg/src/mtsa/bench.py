"""Scaling benchmarks: wall time and kernel-layer peak memory per implementation."""

from __future__ import annotations

import csv
import io
import math
import statistics
import sys
import time
from dataclasses import dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import numkit as nk
from .attn_ref import ScaleFns, multi_head_attention, tsa_naive
from .masks import make_mask
from .mtsa_fast import AttentionConfig, MtsaParams, mtsa_forward

IMPLS = ("naive", "fast", "multihead_dot", "conv_baseline")
CSV_HEADER = ["impl", "n", "batch", "d_model", "heads", "wall_ms", "peak_floats", "seed"]
CONV_WIDTHS = (3, 4, 5)


@dataclass
class BenchRecord:
    impl: str
    n: int
    batch: int
    d_model: int
    heads: int
    wall_ms: float
    peak_floats: int
    seed: int
    parallel_heads: Optional[bool] = None


def time_call(fn: Callable[[], object], repeats: int = 5, warmup: int = 2) -> float:
    """Median wall time in milliseconds over ``repeats`` runs after ``warmup`` runs."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1e3)
    return statistics.median(samples)


def peak_of(fn: Callable[[nk.AllocMeter], object]) -> int:
    meter = nk.AllocMeter()
    meter.reset()
    result = fn(meter)
    del result
    return meter.peak_floats


def naive_forward(x, params: MtsaParams, cfg: AttentionConfig,
                  meter: Optional[nk.AllocMeter] = None) -> np.ndarray:
    """MTSA composed from the tensor-materialising heads."""
    n = x.shape[-1]
    heads = [tsa_naive(x, make_mask(spec, n, dtype=cfg.dtype), p, cfg.fns, meter)
             for spec, p in zip(params.mask_assignment, params.heads)]
    stacked = heads[0] if len(heads) == 1 else nk._track(np.concatenate(heads, axis=-2), meter)
    return nk.matmul(params.W_o, stacked, meter)


class ConvBank:
    """Untrained bank of 1-D convolutions (widths 3, 4, 5) with 'same' padding and relu."""

    def __init__(self, d_model: int, rng: np.random.Generator, dtype="f32"):
        self.weights = [nk.glorot_init(d_model, w * d_model, rng, dtype) for w in CONV_WIDTHS]

    def __call__(self, x: np.ndarray, meter: Optional[nk.AllocMeter] = None) -> np.ndarray:
        n = x.shape[-1]
        outs = []
        for w, W in zip(CONV_WIDTHS, self.weights):
            left = (w - 1) // 2
            pad = [(0, 0)] * (x.ndim - 1) + [(left, w - 1 - left)]
            padded = nk._track(np.pad(x, pad), meter)
            cols = nk._track(np.concatenate([padded[..., s:s + n] for s in range(w)], axis=-2), meter)
            del padded
            outs.append(nk.activation("relu", nk.matmul(W, cols, meter), meter))
            del cols
        return nk._track(np.concatenate(outs, axis=-2), meter)


def bench_config(d_model: int, heads: int, dtype: str, fns: Optional[ScaleFns] = None) -> AttentionConfig:
    if d_model % heads:
        raise nk.ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
    d_h = d_model // heads
    return AttentionConfig(d_e=d_model, d_i=d_h, d_h=d_h, d_a=d_h, h=heads,
                           fns=fns or ScaleFns(), dtype=dtype)


def make_runner(impl: str, d_model: int, heads: int, seed: int, dtype: str,
                parallel_heads: bool = False):
    """Return ``run(x, meter)`` for one implementation with fixed random weights."""
    rng = nk.make_rng(seed)
    cfg = bench_config(d_model, heads, dtype)
    if impl in ("naive", "fast"):
        params = MtsaParams.init(cfg, rng)
        if impl == "naive":
            return lambda x, meter=None: naive_forward(x, params, cfg, meter)
        return lambda x, meter=None: mtsa_forward(x, params, cfg, meter=meter, parallel=parallel_heads)
    if impl == "multihead_dot":
        d_h = cfg.d_h
        Wq = [nk.glorot_init(d_h, d_model, rng, dtype) for _ in range(heads)]
        Wk = [nk.glorot_init(d_h, d_model, rng, dtype) for _ in range(heads)]
        Wv = [nk.glorot_init(d_h, d_model, rng, dtype) for _ in range(heads)]
        W_o = nk.glorot_init(d_model, d_model, rng, dtype)
        return lambda x, meter=None: multi_head_attention(x, x, x, Wq, Wk, Wv, W_o, meter)
    if impl == "conv_baseline":
        bank = ConvBank(d_model, rng, dtype)
        return lambda x, meter=None: bank(x, meter)
    raise nk.ConfigError(f"unknown impl {impl!r}; choose from {IMPLS}")


def naive_tensor_floats(n: int, batch: int, d_model: int) -> int:
    """Size of the score tensor the naive path materialises (all heads together)."""
    return batch * d_model * n * n


def run_bench(impls: Sequence[str], lens: Sequence[int], batch: int, d_model: int, heads: int,
              seed: int = 0, dtype: str = "f32", repeats: int = 5, warmup: int = 2,
              parallel_heads: bool = False, max_naive_floats: float = 6.4e7,
              log=sys.stderr) -> list[BenchRecord]:
    lens = list(lens)
    if lens != sorted(lens) or len(set(lens)) != len(lens):
        raise nk.ConfigError("sequence lengths must be strictly ascending")
    for impl in impls:
        if impl not in IMPLS:
            raise nk.ConfigError(f"unknown impl {impl!r}; choose from {IMPLS}")
    records = []
    for impl in impls:
        run = make_runner(impl, d_model, heads, seed, dtype, parallel_heads)
        for n in lens:
            if impl == "naive" and naive_tensor_floats(n, batch, d_model) > max_naive_floats:
                if log is not None:
                    print(f"skipping naive at n={n}: score tensor exceeds {max_naive_floats:.3g} floats",
                          file=log)
                continue
            x = nk.make_rng(seed + n).standard_normal((batch, d_model, n)).astype(nk.resolve_dtype(dtype))
            wall = time_call(lambda: run(x), repeats, warmup)
            peak = peak_of(lambda meter: run(x, meter))
            records.append(BenchRecord(impl, n, batch, d_model, heads, wall, peak, seed,
                                       parallel_heads if parallel_heads else None))
    return records


def format_csv(records: Sequence[BenchRecord]) -> str:
    extra = any(r.parallel_heads is not None for r in records)
    header = CSV_HEADER + (["parallel_heads"] if extra else [])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in records:
        row = [r.impl, r.n, r.batch, r.d_model, r.heads, repr(float(r.wall_ms)), r.peak_floats, r.seed]
        if extra:
            row.append(int(bool(r.parallel_heads)))
        writer.writerow(row)
    return buf.getvalue()


def parse_csv(text: str) -> list[BenchRecord]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header[:len(CSV_HEADER)] != CSV_HEADER:
        raise ValueError(f"unexpected bench header {header}")
    extra = len(header) > len(CSV_HEADER)
    out = []
    for row in reader:
        out.append(BenchRecord(row[0], int(row[1]), int(row[2]), int(row[3]), int(row[4]),
                               float(row[5]), int(row[6]), int(row[7]),
                               bool(int(row[8])) if extra else None))
    return out


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(xs, dtype=float))
    ly = np.log(np.asarray(ys, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])
