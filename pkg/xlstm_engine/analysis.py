"""
Analysis Module
Closed-form FLOP, parameter, memory-state and KV-cache calculators for the
mLSTM stack and the attention comparator.

All counts are exact integers. Multiply-accumulates count 2 FLOPs; other ops
are weighted by the FlopFactors (default 1). The feed-forward width is the
built d_ff (factor 2.66 rounded up to a multiple of 64), so parameter counts
match the built model exactly.
"""
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import pandas as pd

from xlstm_engine.errors import ConfigurationError
from xlstm_engine.models import CostReport, FlopFactors, ModelConfig

logger = logging.getLogger(__name__)

BYTES_PER_VALUE = 4


def mlstm_cell_flop_terms(
    num_heads: int,
    d_qk: int,
    d_v: int,
    seq_len: int,
    chunk_size: int = 64,
    factors: Optional[FlopFactors] = None,
) -> Dict[str, int]:
    """Forward FLOPs of the chunkwise mLSTM cell, per named term, summed over heads and chunks."""
    if chunk_size < 1 or seq_len % chunk_size:
        raise ConfigurationError(f"seq_len {seq_len} is not divisible by chunk_size {chunk_size}")
    f = factors or FlopFactors()
    L = chunk_size
    scale = num_heads * (seq_len // chunk_size)
    triangle = L * (L + 1) // 2

    per_chunk = {
        "chunkwise_gates": triangle + 2 * L,
        "gates_and_max_state": 3 + f.f_max + f.f_exp + L * (3 + 2 * f.f_exp),
        "inter_numerator": 2 * d_qk * d_v + 4 * L * d_qk * d_v + 3 * L * d_qk,
        "inter_denominator": d_qk + 4 * L * d_qk,
        "gate_matrix": triangle + L * L * (3 + f.f_mask + f.f_max + f.f_exp) + L * (1 + f.f_max),
        "gated_attn_logits": 2 * L * L * (1 + d_qk),
        "intra_numerator": 2 * L * L * d_v,
        "intra_denominator": 2 * L * L,
        "output_combination": L * (1 + f.f_max) + L * (2 + f.f_abs + f.f_exp + f.f_max + 2 * d_v),
    }
    return {name: scale * value for name, value in per_chunk.items()}


def flops_mlstm_cell(cfg: ModelConfig, seq_len: int, chunk_size: int = 64, factors: Optional[FlopFactors] = None) -> int:
    return sum(mlstm_cell_flop_terms(cfg.num_heads, cfg.d_qk, cfg.d_hv, seq_len, chunk_size, factors).values())


def _feedforward_flops(cfg: ModelConfig, seq_len: int, f: FlopFactors) -> int:
    return 6 * seq_len * cfg.d_model * cfg.d_ff + 2 * seq_len * cfg.d_model * f.f_swish


def _embedding_and_logits_flops(cfg: ModelConfig, seq_len: int) -> int:
    return 2 * seq_len * cfg.vocab_size * cfg.d_model + 2 * seq_len * cfg.d_model * cfg.vocab_size


def flops_mlstm_model(cfg: ModelConfig, seq_len: int, chunk_size: int = 64, factors: Optional[FlopFactors] = None) -> int:
    """Forward FLOPs: embeddings + num_blocks * (mLSTM + feedforward) + final logits."""
    f = factors or FlopFactors()
    T, D, NH = seq_len, cfg.d_model, cfg.num_heads
    projections = 2 * T * D * NH * (2 * cfg.d_qk + cfg.d_hv + 2)
    output_gate = 4 * T * D * NH * cfg.d_hv + T * NH * cfg.d_hv * f.f_sig
    cell = flops_mlstm_cell(cfg, seq_len, chunk_size, f)
    per_block = projections + output_gate + cell + _feedforward_flops(cfg, T, f)
    return _embedding_and_logits_flops(cfg, T) + cfg.num_blocks * per_block


def flops_transformer_model(cfg: ModelConfig, seq_len: int, factors: Optional[FlopFactors] = None) -> int:
    """Forward FLOPs of the softmax-attention stack at the same widths."""
    f = factors or FlopFactors()
    T, D, NH = seq_len, cfg.d_model, cfg.num_heads
    attention = (
        2 * T * D * NH * (2 * cfg.d_qk + cfg.d_hv)
        + 2 * T * T * (cfg.d_qk * NH)
        + 3 * T * T * NH
        + 2 * T * T * (NH * cfg.d_qk)
        + 2 * T * D * (NH * cfg.d_hv)
    )
    per_block = attention + _feedforward_flops(cfg, T, f)
    return _embedding_and_logits_flops(cfg, T) + cfg.num_blocks * per_block


def count_params_mlstm(cfg: ModelConfig, include_biases: bool = False) -> int:
    """Parameter census; q/k/v/output-gate biases only with include_biases and cfg.use_bias."""
    D, NH = cfg.d_model, cfg.num_heads
    mlstm = (
        D * NH * (2 * cfg.d_qk + cfg.d_hv)
        + 2 * D * NH + 2 * NH
        + D * D
        + D * D
        + D
    )
    if include_biases and cfg.use_bias:
        mlstm += NH * (2 * cfg.d_qk + cfg.d_hv) + D
    feedforward = 3 * D * cfg.d_ff
    return cfg.vocab_size * D + cfg.num_blocks * (mlstm + feedforward + 2 * D) + D + D * cfg.vocab_size


def count_params_transformer(cfg: ModelConfig) -> int:
    D, NH = cfg.d_model, cfg.num_heads
    attention = D * NH * (2 * cfg.d_qk + cfg.d_hv) + D * D
    feedforward = 3 * D * cfg.d_ff
    return cfg.vocab_size * D + cfg.num_blocks * (attention + feedforward + 2 * D) + D + D * cfg.vocab_size


def state_size_bytes(cfg: ModelConfig) -> int:
    """blocks x heads x d_qk x d_hv x 4 bytes (the matrix memories)."""
    return cfg.num_blocks * cfg.num_heads * cfg.d_qk * cfg.d_hv * BYTES_PER_VALUE


def kv_equiv_tokens(cfg: ModelConfig) -> int:
    """Tokens of an equal-width KV cache (K+V per block) that fit in the state size."""
    per_token = 2 * cfg.num_blocks * cfg.d_model * BYTES_PER_VALUE
    if per_token == 0:
        return 0
    return state_size_bytes(cfg) // per_token


def transformer_kv_cache_bytes(cfg: ModelConfig, tokens: int, batch: int = 1) -> int:
    return 2 * cfg.num_blocks * cfg.d_model * BYTES_PER_VALUE * tokens * batch


def to_mb(num_bytes: int) -> float:
    """Decimal megabytes, one decimal."""
    return round(num_bytes / 1e6, 1)


def to_mib(num_bytes: int) -> float:
    return round(num_bytes / 2**20, 1)


def cost_report(cfg: ModelConfig, seq_len: int, chunk_size: int = 64, factors: Optional[FlopFactors] = None) -> CostReport:
    forward = flops_mlstm_model(cfg, seq_len, chunk_size, factors)
    state_bytes = state_size_bytes(cfg)
    return CostReport(
        config_id=cfg.config_id,
        seq_len=seq_len,
        chunk_size=chunk_size,
        cell_flops=flops_mlstm_cell(cfg, seq_len, chunk_size, factors),
        forward_flops=forward,
        backward_flops=2 * forward,
        train_step_flops=3 * forward,
        param_count=count_params_mlstm(cfg),
        state_bytes=state_bytes,
        kv_equiv_tokens=kv_equiv_tokens(cfg),
        state_mb=to_mb(state_bytes),
        state_mib=to_mib(state_bytes),
    )


def head_sweep(
    base: ModelConfig,
    head_counts: Iterable[int] = (4, 8, 16, 32),
    seq_len: int = 8192,
    chunk_size: int = 64,
) -> pd.DataFrame:
    """Memory state, KV-cache-equivalent tokens and per-block cell FLOPs across head counts."""
    rows = []
    for heads in head_counts:
        cfg = ModelConfig(**{**base.model_dump(), "num_heads": heads})
        rows.append(
            {
                "num_heads": heads,
                "d_qk": cfg.d_qk,
                "d_hv": cfg.d_hv,
                "state_mb": to_mb(state_size_bytes(cfg)),
                "kv_cache_tokens": kv_equiv_tokens(cfg),
                "cell_flops_forward": flops_mlstm_cell(cfg, seq_len, chunk_size),
            }
        )
    return pd.DataFrame(rows)


def reports_frame(reports: List[CostReport]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in reports])


def format_table(frame: pd.DataFrame) -> str:
    """Aligned plain-text rendering of a result table."""
    return frame.to_string(index=False)


def write_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info(f"📝 Wrote {len(frame)} rows to {path}")
    return path
