"""Export of token2token and source2token attention maps as PGM images and CSV."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .masks import make_mask
from .mtsa_fast import AttentionConfig, MtsaParams, normalized_token2token, source2token_scores


@dataclass
class HeatmapBundle:
    token2token: list  # per head, n x n, rows are keys and columns queries
    source2token: list  # per head, length-n feature-averaged scores
    labels: list


def build_bundle(x: np.ndarray, params: MtsaParams, cfg: AttentionConfig, labels=None) -> HeatmapBundle:
    n = x.shape[-1]
    t2t, s2t = [], []
    for spec, head in zip(params.mask_assignment, params.heads):
        mask = make_mask(spec, n, dtype=cfg.dtype)
        t2t.append(normalized_token2token(x, mask, head, cfg.fns, cfg.divisor))
        s2t.append(source2token_scores(x, head, cfg.fns).mean(axis=0))
    labels = list(labels) if labels is not None else [str(i) for i in range(n)]
    return HeatmapBundle(t2t, s2t, labels)


def to_pgm(weights: np.ndarray) -> bytes:
    """8-bit binary PGM with [0, 1] mapped linearly onto [0, 255]."""
    rows, cols = weights.shape
    pixels = np.rint(np.clip(weights, 0.0, 1.0) * 255).astype(np.uint8)
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    cols, rows = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


def matrix_csv(m) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in np.atleast_2d(m):
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def parse_matrix_csv(text: str) -> np.ndarray:
    return np.array([[float(v) for v in row] for row in csv.reader(io.StringIO(text)) if row])


def read_tokens(text: str) -> tuple[list, np.ndarray]:
    """Parse ``label<TAB>v1 v2 ...`` lines (one token per line) into labels and a d x n matrix."""
    labels, columns = [], []
    for line in text.splitlines():
        if not line.strip():
            continue
        label, _, values = line.partition("\t")
        if not values:
            raise ValueError(f"token line without a vector: {line!r}")
        labels.append(label)
        columns.append([float(v) for v in values.split()])
    if not columns:
        raise ValueError("no tokens in input")
    if len({len(c) for c in columns}) != 1:
        raise ValueError("token vectors differ in length")
    return labels, np.array(columns, dtype=np.float64).T


def write_bundle(bundle: HeatmapBundle, prefix) -> list[Path]:
    prefix = str(prefix)
    written = []

    def put(path, data):
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, bytes):
            p.write_bytes(data)
        else:
            p.write_text(data)
        written.append(p)

    for c, (t2t, s2t) in enumerate(zip(bundle.token2token, bundle.source2token)):
        put(f"{prefix}head{c}.pgm", to_pgm(t2t))
        put(f"{prefix}head{c}_token2token.csv", matrix_csv(t2t))
        put(f"{prefix}head{c}_source2token.csv", matrix_csv(s2t))
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(bundle.labels)
    put(f"{prefix}tokens.csv", buf.getvalue())
    return written
