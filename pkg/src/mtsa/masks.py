"""Positional masks for attention.

Index convention: row ``i`` is the key (dependent) token, column ``j`` the
query (governor) token.  The additive form holds ``0`` / ``-inf`` and is added
to alignment scores; the multiplicative form is its ``exp``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numkit import ConfigError, resolve_dtype

KINDS = ("forward", "backward", "none", "window")


@dataclass(frozen=True)
class PositionalMask:
    n: int
    kind: str
    additive: np.ndarray
    multiplicative: np.ndarray
    w: Optional[int] = None

    @property
    def label(self) -> str:
        return f"window:{self.w}" if self.kind == "window" else self.kind


def parse_kind(spec: str) -> tuple[str, Optional[int]]:
    """``"forward"`` -> ("forward", None); ``"window:3"`` -> ("window", 3)."""
    kind, _, arg = spec.partition(":")
    if kind not in KINDS:
        raise ConfigError(f"unknown mask kind {spec!r}")
    if kind == "window":
        if not arg:
            raise ConfigError("window mask needs a half-width, e.g. window:2")
        return kind, int(arg)
    if arg:
        raise ConfigError(f"mask kind {kind!r} takes no argument")
    return kind, None


def _allowed(kind: str, n: int, w: Optional[int]) -> np.ndarray:
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    if kind == "forward":
        return i < j
    if kind == "backward":
        return i > j
    if kind == "none":
        return np.ones((n, n), dtype=bool)
    if kind == "window":
        if w is None or w < 1:
            raise ConfigError("window mask needs w >= 1")
        dist = np.abs(i - j)
        return (dist > 0) & (dist <= w)
    raise ConfigError(f"unknown mask kind {kind!r}")


@functools.lru_cache(maxsize=256)
def _cached(kind: str, n: int, w: Optional[int], dtype: np.dtype) -> PositionalMask:
    allowed = _allowed(kind, n, w)
    additive = np.where(allowed, 0.0, -np.inf).astype(dtype)
    multiplicative = allowed.astype(dtype)
    additive.flags.writeable = False
    multiplicative.flags.writeable = False
    return PositionalMask(n=n, kind=kind, additive=additive, multiplicative=multiplicative,
                          w=w if kind == "window" else None)


def make_mask(kind: str, n: int, w: Optional[int] = None, dtype="f64") -> PositionalMask:
    """Build (or fetch from cache) an ``n x n`` mask.

    ``kind`` may also be given as ``"window:<w>"``.
    """
    if ":" in kind:
        kind, w = parse_kind(kind)
    elif kind not in KINDS:
        raise ConfigError(f"unknown mask kind {kind!r}")
    if n < 1:
        raise ConfigError(f"mask size must be >= 1, got {n}")
    if kind == "window" and (w is None or w < 1):
        raise ConfigError("window mask needs w >= 1")
    return _cached(kind, int(n), None if kind != "window" else int(w), resolve_dtype(dtype))


def fully_masked_queries(mask: PositionalMask) -> set[int]:
    """Zero-based indices of queries that cannot attend to any key."""
    dead = ~mask.multiplicative.any(axis=0)
    return set(np.flatnonzero(dead).tolist())
