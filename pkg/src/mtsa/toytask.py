"""A synthetic order-sensitive classification task.

Each sequence holds marker tokens A and B exactly once among random filler
tokens; the label is 1 iff A comes before B.  Without positional masks an
MTSA encoder is permutation equivariant and pooling makes the classifier
permutation invariant, so only the directional-mask variant can solve it.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import numkit as nk
from .attn_ref import ScaleFns
from .grad import Tape, backward
from .mtsa_fast import AttentionConfig, MtsaParams, default_mask_assignment, mtsa_forward

TOKEN_A = 0
TOKEN_B = 1

VARIANTS = {
    "fwbw": default_mask_assignment,
    "nomask": lambda h: ["none"] * h,
}


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_finite_loss: float):
        super().__init__(f"loss became non-finite at step {step}; last finite loss {last_finite_loss}")
        self.step = step
        self.last_finite_loss = last_finite_loss


@dataclass
class ToyDataset:
    tokens: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __len__(self):
        return len(self.labels)

    def to_text(self) -> str:
        lines = [" ".join(str(int(t)) for t in row) + f"\t{int(y)}"
                 for row, y in zip(self.tokens, self.labels)]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str, split: str = "train") -> "ToyDataset":
        rows, labels = [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            ids, label = line.split("\t")
            rows.append([int(t) for t in ids.split()])
            labels.append(int(label))
        return cls(np.array(rows, dtype=np.int64), np.array(labels, dtype=np.int64), split)


def label_of(sequence) -> int:
    seq = list(sequence)
    return int(seq.index(TOKEN_A) < seq.index(TOKEN_B))


def _split_rng(seed: int, split: str) -> np.random.Generator:
    code = {"train": 0, "eval": 1}[split]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), code])))


def gen_dataset(seed: int, count: int, n: int, V: int, split: str = "train") -> ToyDataset:
    if n < 2:
        raise ValueError("sequences need at least 2 positions")
    if V < 3:
        raise ValueError("vocabulary needs the two markers plus a filler")
    rng = _split_rng(seed, split)
    tokens = rng.integers(2, V, size=(count, n))
    labels = rng.permutation(np.arange(count) % 2)
    for row, y in zip(tokens, labels):
        first, second = sorted(rng.choice(n, size=2, replace=False))
        row[first], row[second] = (TOKEN_A, TOKEN_B) if y else (TOKEN_B, TOKEN_A)
    return ToyDataset(tokens.astype(np.int64), labels.astype(np.int64), split)


@dataclass
class ToyModel:
    cfg: AttentionConfig
    vocab: int
    params: dict
    mask_assignment: list
    pool_sigma: str = "relu"
    p_kp: float = 1.0

    @classmethod
    def init(cls, cfg: AttentionConfig, vocab: int, rng: np.random.Generator,
             mask_assignment: Optional[list] = None, pool_sigma: str = "relu") -> "ToyModel":
        dt = cfg.dtype
        mtsa = MtsaParams.init(cfg, rng, mask_assignment)
        D = cfg.h * cfg.d_h
        params = {"embed": nk.glorot_init(cfg.d_e, vocab, rng, dt)}
        params.update(mtsa.named("mtsa."))
        params.update({
            "pool.W_s1": nk.glorot_init(cfg.d_a, D, rng, dt),
            "pool.b_s1": nk.zeros(cfg.d_a, 1, dt),
            "pool.W_s2": nk.glorot_init(D, cfg.d_a, rng, dt),
            "pool.b_s2": nk.zeros(D, 1, dt),
            "cls.W": nk.glorot_init(2, D, rng, dt),
            "cls.b": nk.zeros(2, 1, dt),
        })
        return cls(cfg, vocab, params, list(mtsa.mask_assignment), pool_sigma)

    def with_params(self, params: dict) -> "ToyModel":
        return replace(self, params=dict(params))

    def mtsa_params(self, values: dict) -> MtsaParams:
        return MtsaParams.from_named(values, self.cfg.h, self.mask_assignment, prefix="mtsa.")


def _logits(model: ToyModel, tokens, k_, values: dict, rng=None, train=False):
    x = k_.embed(values["embed"], tokens)
    if train and model.p_kp < 1.0:
        keep = model.p_kp
        drop = (rng.random(k_.value(x).shape) < keep) / keep
        x = k_.mul(x, drop.astype(k_.dtype))
    y = mtsa_forward(x, model.mtsa_params(values), model.cfg, rng, train=train, kernel=k_)
    scores = k_.add(k_.matmul(values["pool.W_s1"], y), values["pool.b_s1"])
    scores = k_.activation(model.pool_sigma, scores)
    scores = k_.add(k_.matmul(values["pool.W_s2"], scores), values["pool.b_s2"])
    weights = k_.transpose(k_.column_softmax(k_.transpose(scores)))
    pooled = k_.sum_cols(k_.mul(weights, y))
    return k_.add(k_.matmul(values["cls.W"], pooled), values["cls.b"])


def model_forward(model: ToyModel, tokens, labels=None, *, tape: Optional[Tape] = None,
                  rng: Optional[np.random.Generator] = None, train: bool = False) -> dict:
    """Embed, encode with MTSA, pool, classify.

    Returns ``{"logits": (batch, 2) array, "loss": mean cross-entropy}``; with
    a ``tape`` the loss is a tape node ready for :func:`mtsa.grad.backward`.
    """
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.vocab):
        raise IndexError(f"token id out of range [0, {model.vocab})")
    if tape is not None:
        k_ = tape
        values = {name: tape.param(name, v) for name, v in model.params.items()}
    else:
        k_ = nk.Kernel(dtype=model.cfg.dtype)
        values = model.params
    logits = _logits(model, tokens, k_, values, rng, train)
    out = {"logits": np.asarray(k_.value(logits))[..., 0]}
    if labels is not None:
        out["loss"] = k_.softmax_xent(logits, labels)
    return out


def model_loss(model: ToyModel, tokens, labels, tape: Optional[Tape] = None):
    return model_forward(model, tokens, labels, tape=tape)["loss"]


def accuracy(model: ToyModel, data: ToyDataset, batch: int = 500) -> float:
    hits = 0
    for start in range(0, len(data), batch):
        logits = model_forward(model, data.tokens[start:start + batch])["logits"]
        hits += int(np.sum(np.argmax(logits, axis=-1) == data.labels[start:start + batch]))
    return hits / max(len(data), 1)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != np.shape(p):
            raise nk.DimensionError(f"gradient for {name} has shape {np.shape(g)}, param {np.shape(p)}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        params[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class TrainConfig:
    n: int = 16
    V: int = 12
    train_count: int = 4000
    eval_count: int = 1000
    steps: int = 3000
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0
    d_e: int = 32
    d_i: int = 16
    d_h: int = 16
    d_a: int = 16
    h: int = 2
    fns: ScaleFns = field(default_factory=ScaleFns)
    p_kp: float = 1.0
    p_ad: float = 1.0
    log_every: int = 100
    dtype: str = "f64"

    def attention(self) -> AttentionConfig:
        return AttentionConfig(d_e=self.d_e, d_i=self.d_i, d_h=self.d_h, d_a=self.d_a, h=self.h,
                               fns=self.fns, p_ad=self.p_ad, dtype=self.dtype)


@dataclass
class TrainResult:
    variant: str
    eval_acc: float
    metrics: list  # (step, loss, eval_acc) rows
    model: ToyModel


def train_variant(cfg: TrainConfig, variant: str, train: Optional[ToyDataset] = None,
                  evalset: Optional[ToyDataset] = None) -> TrainResult:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    train = train or gen_dataset(cfg.seed, cfg.train_count, cfg.n, cfg.V, "train")
    evalset = evalset or gen_dataset(cfg.seed, cfg.eval_count, cfg.n, cfg.V, "eval")
    rng = nk.make_rng(cfg.seed)
    model = replace(ToyModel.init(cfg.attention(), cfg.V, rng, VARIANTS[variant](cfg.h)),
                    p_kp=cfg.p_kp)
    state = AdamState(lr=cfg.lr)
    metrics = []
    last_finite = math.nan
    order = np.arange(len(train))
    pos = len(order)
    for step in range(1, cfg.steps + 1):
        if pos + cfg.batch > len(order):
            order = rng.permutation(len(train))
            pos = 0
        idx = order[pos:pos + cfg.batch]
        pos += cfg.batch
        tape = Tape(cfg.dtype)
        try:
            out = model_forward(model, train.tokens[idx], train.labels[idx], tape=tape,
                                rng=rng, train=True)
        except nk.NumericError:
            # non-finite parameters surface inside the attention heads
            raise TrainingDiverged(step, last_finite) from None
        loss = float(out["loss"].value)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, last_finite)
        last_finite = loss
        adam_step(model.params, backward(tape, out["loss"]), state)
        if step % cfg.log_every == 0 or step == cfg.steps:
            metrics.append((step, loss, accuracy(model, evalset)))
    acc = accuracy(model, evalset)
    if not metrics:
        metrics.append((0, float(model_loss(model, evalset.tokens, evalset.labels)), acc))
    return TrainResult(variant, acc, metrics, model)


def train_eval(cfg: TrainConfig, variants=("fwbw", "nomask")) -> dict:
    """Train each mask variant with identical data, seed and budget; map variant to eval accuracy."""
    train = gen_dataset(cfg.seed, cfg.train_count, cfg.n, cfg.V, "train")
    evalset = gen_dataset(cfg.seed, cfg.eval_count, cfg.n, cfg.V, "eval")
    return {v: train_variant(cfg, v, train, evalset).eval_acc for v in variants}


def format_metrics(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss", "eval_acc"])
    for step, loss, acc in rows:
        writer.writerow([int(step), repr(float(loss)), repr(float(acc))])
    return buf.getvalue()


def parse_metrics(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != ["step", "loss", "eval_acc"]:
        raise ValueError(f"unexpected metrics header {header}")
    return [(int(s), float(l), float(a)) for s, l, a in reader]


def write_metrics(path, rows) -> None:
    Path(path).write_text(format_metrics(rows))
