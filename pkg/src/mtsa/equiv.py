"""Randomised agreement check between the fast path and the naive tensor path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .attn_ref import SCALE_CHOICES, ScaleFns
from .bench import naive_forward
from .mtsa_fast import AttentionConfig, MtsaParams, mtsa_forward

MASK_CHOICES = ("forward", "backward", "none")
TOLERANCE = {"f64": 1e-9, "f32": 1e-4}


@dataclass
class Trial:
    cfg: AttentionConfig
    params: MtsaParams
    x: np.ndarray

    @property
    def label(self) -> str:
        masks = "+".join(sorted(set(self.params.mask_assignment)))
        return f"h={self.cfg.h},masks={masks},t={self.cfg.fns.sigma_t},s={self.cfg.fns.sigma_s}"


def sample_trial(rng: np.random.Generator, n_max: int = 32, dims_max: int = 16,
                 heads=(1, 2, 4), dtype: str = "f64", divisor: str = "di",
                 masks=MASK_CHOICES) -> Trial:
    n = int(rng.integers(1, n_max + 1))
    d_e, d_i, d_h, d_a = (int(v) for v in rng.integers(1, dims_max + 1, size=4))
    h = int(rng.choice(heads))
    fns = ScaleFns(sigma_t=str(rng.choice(SCALE_CHOICES)), sigma_s=str(rng.choice(SCALE_CHOICES)))
    cfg = AttentionConfig(d_e=d_e, d_i=d_i, d_h=d_h, d_a=d_a, h=h, fns=fns, dtype=dtype,
                          divisor=divisor)
    assignment = [str(m) for m in rng.choice(masks, size=h)]
    params = MtsaParams.init(cfg, rng, assignment)
    # nonzero biases so every term of the score is exercised
    for head in params.heads:
        head.b_s1 = rng.normal(0, 0.5, head.b_s1.shape).astype(head.b_s1.dtype)
        head.b_s2 = rng.normal(0, 0.5, head.b_s2.shape).astype(head.b_s2.dtype)
    x = rng.standard_normal((d_e, n)).astype(nk.resolve_dtype(dtype))
    return Trial(cfg, params, x)


def trial_error(trial: Trial) -> float:
    """Absolute (f64) or max-relative (f32) disagreement of the two paths."""
    fast = mtsa_forward(trial.x, trial.params, trial.cfg)
    ref = naive_forward(trial.x, trial.params, trial.cfg)
    diff = float(np.max(np.abs(fast.astype(np.float64) - ref.astype(np.float64)), initial=0.0))
    if trial.cfg.dtype == "f32":
        return diff / max(float(np.max(np.abs(ref), initial=0.0)), 1e-6)
    return diff


def run_equivalence(trials: int = 200, n_max: int = 32, dims_max: int = 16, heads=(1, 2, 4),
                    dtype: str = "f64", seed: int = 0, divisor: str = "di") -> dict:
    rng = nk.make_rng(seed)
    tol = TOLERANCE[dtype]
    classes: dict[str, float] = {}
    worst = 0.0
    for _ in range(trials):
        trial = sample_trial(rng, n_max, dims_max, heads, dtype, divisor)
        err = trial_error(trial)
        classes[trial.label] = max(classes.get(trial.label, 0.0), err)
        worst = max(worst, err)
    return {
        "trials": trials,
        "dtype": dtype,
        "divisor": divisor,
        "metric": "max_abs_diff" if dtype == "f64" else "max_rel_diff",
        "max_abs_diff" if dtype == "f64" else "max_rel_diff": worst,
        "tolerance": tol,
        "classes": dict(sorted(classes.items())),
        "passed": worst <= tol,
    }
