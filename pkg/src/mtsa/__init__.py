"""Multi-mask tensorised self-attention: naive oracle, matrix-only fast path,
reverse-mode gradients and benchmarking tools."""

from .attn_ref import ScaleFns, TsaParams, tsa_naive
from .masks import PositionalMask, fully_masked_queries, make_mask
from .mtsa_fast import AttentionConfig, MtsaParams, mtsa_forward, tsa_head_fast
from .numkit import AllocMeter, Kernel, make_rng

__all__ = [
    "AllocMeter", "AttentionConfig", "Kernel", "MtsaParams", "PositionalMask", "ScaleFns",
    "TsaParams", "fully_masked_queries", "make_mask", "make_rng", "mtsa_forward",
    "tsa_head_fast", "tsa_naive",
]
