import pandas as pd
import pytest

from xlstm_engine.analysis import (
    cost_report,
    count_params_mlstm,
    count_params_transformer,
    flops_mlstm_cell,
    flops_mlstm_model,
    flops_transformer_model,
    format_table,
    head_sweep,
    kv_equiv_tokens,
    mlstm_cell_flop_terms,
    reports_frame,
    state_size_bytes,
    to_mb,
    to_mib,
    transformer_kv_cache_bytes,
    write_csv,
)
from xlstm_engine.errors import ConfigurationError
from xlstm_engine.models import FlopFactors, ModelConfig

SEVEN_B = ModelConfig.xlstm_7b()

PER_CHUNK_7B = {
    "chunkwise_gates": 2208,
    "gates_and_max_state": 325,
    "inter_numerator": 33_865_728,
    "inter_denominator": 65_792,
    "gate_matrix": 26_784,
    "gated_attn_logits": 2_105_344,
    "intra_numerator": 4_194_304,
    "intra_denominator": 8_192,
    "output_combination": 65_984,
}


def test_seven_b_shapes():
    assert (SEVEN_B.d_qk, SEVEN_B.d_hv, SEVEN_B.d_ff) == (256, 512, 10944)


def test_per_chunk_terms_of_seven_b_head():
    terms = mlstm_cell_flop_terms(1, 256, 512, seq_len=64, chunk_size=64)
    assert terms == PER_CHUNK_7B
    assert sum(terms.values()) == 40_334_661


def test_seven_b_cell_flops_at_8k():
    # 8 heads x 128 chunks
    assert flops_mlstm_cell(SEVEN_B, 8192, 64) == 1024 * 40_334_661 == 41_302_692_864


def test_smallest_cell_by_hand():
    terms = mlstm_cell_flop_terms(1, 1, 1, 1, 1)
    assert list(terms.values()) == [3, 10, 9, 5, 9, 4, 2, 2, 9]
    assert sum(terms.values()) == 53


def test_zero_factors_drop_only_weighted_ops():
    terms = mlstm_cell_flop_terms(1, 1, 1, 1, 1, FlopFactors.zero())
    assert sum(terms.values()) == 41


def test_indivisible_sequence_is_rejected():
    with pytest.raises(ConfigurationError):
        mlstm_cell_flop_terms(8, 256, 512, seq_len=100, chunk_size=64)
    with pytest.raises(ConfigurationError):
        flops_mlstm_model(SEVEN_B, 100, 64)


def test_seven_b_parameter_census():
    assert count_params_mlstm(SEVEN_B) == 6_865_039_872
    assert count_params_mlstm(SEVEN_B) == pytest.approx(6_865_424_896, rel=3e-3)


def test_smallest_parameter_census():
    cfg = ModelConfig(vocab_size=2, num_blocks=0, d_model=2, num_heads=1)
    assert count_params_mlstm(cfg) == 10
    assert count_params_transformer(cfg) == 10


def test_bias_census_only_adds_when_enabled():
    cfg = ModelConfig(vocab_size=10, num_blocks=2, d_model=8, num_heads=2)
    # q, k (2 x 2 x 2) + v (2 x 4) + output gate (8), per block
    assert count_params_mlstm(cfg, include_biases=True) - count_params_mlstm(cfg) == 2 * (8 + 8 + 8)
    no_bias = ModelConfig(**{**cfg.model_dump(), "use_bias": False})
    assert count_params_mlstm(no_bias, include_biases=True) == count_params_mlstm(no_bias)


@pytest.mark.parametrize(
    "heads,state_mb,tokens",
    [(4, 268.4, 256), (8, 134.2, 128), (16, 67.1, 64), (32, 33.6, 32)],
)
def test_state_size_across_head_counts(heads, state_mb, tokens):
    cfg = ModelConfig.xlstm_7b(num_heads=heads)
    assert to_mb(state_size_bytes(cfg)) == state_mb
    assert kv_equiv_tokens(cfg) == tokens


def test_head_sweep_frame():
    frame = head_sweep(SEVEN_B)
    assert list(frame["num_heads"]) == [4, 8, 16, 32]
    assert list(frame["state_mb"]) == [268.4, 134.2, 67.1, 33.6]
    assert list(frame["kv_cache_tokens"]) == [256, 128, 64, 32]
    assert frame.loc[frame["num_heads"] == 8, "cell_flops_forward"].item() == 41_302_692_864
    # more heads, smaller per-head state: cell FLOPs fall with the head count
    assert frame["cell_flops_forward"].is_monotonic_decreasing


def test_mlstm_flops_are_linear_in_sequence_length():
    for T in (64, 512, 4096):
        assert flops_mlstm_model(SEVEN_B, 2 * T) == 2 * flops_mlstm_model(SEVEN_B, T)


def test_attention_flops_are_superlinear():
    assert flops_transformer_model(SEVEN_B, 8192) > 2 * flops_transformer_model(SEVEN_B, 4096)


def test_model_without_blocks_counts_embedding_and_head_only():
    cfg = ModelConfig(vocab_size=100, num_blocks=0, d_model=16, num_heads=2)
    assert flops_mlstm_model(cfg, 64) == 4 * 64 * 100 * 16
    assert flops_transformer_model(cfg, 64) == flops_mlstm_model(cfg, 64)
    assert state_size_bytes(cfg) == 0
    assert kv_equiv_tokens(cfg) == 0


def test_kv_cache_grows_linearly():
    per_token = 2 * 32 * 4096 * 4
    assert transformer_kv_cache_bytes(SEVEN_B, 0) == 0
    assert transformer_kv_cache_bytes(SEVEN_B, 1001) - transformer_kv_cache_bytes(SEVEN_B, 1000) == per_token
    assert transformer_kv_cache_bytes(SEVEN_B, 10, batch=3) == 30 * per_token


def test_unit_conversions():
    assert to_mb(134_217_728) == 134.2
    assert to_mib(134_217_728) == 128.0


def test_cost_report():
    report = cost_report(SEVEN_B, 8192, 64)
    assert report.backward_flops == 2 * report.forward_flops
    assert report.train_step_flops == 3 * report.forward_flops
    assert report.cell_flops == 41_302_692_864
    assert report.param_count == 6_865_039_872
    assert report.state_mb == 134.2
    assert report.state_mib == 128.0
    assert report.kv_equiv_tokens == 128


def test_table_and_csv(tmp_path):
    frame = reports_frame([cost_report(SEVEN_B, 8192), cost_report(ModelConfig.desk(), 256)])
    assert len(frame) == 2
    text = format_table(frame)
    assert "b32-d4096-h8-v50257" in text and "b4-d128-h2-v257" in text

    path = write_csv(frame, tmp_path / "out" / "analysis.csv")
    back = pd.read_csv(path)
    assert list(back.columns) == list(frame.columns)
    assert back["param_count"].tolist() == frame["param_count"].tolist()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
