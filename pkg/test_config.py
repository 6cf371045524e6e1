import pytest
from pydantic import ValidationError

from xlstm_engine.config import config, read_model_config, write_model_config
from xlstm_engine.errors import ConfigurationError
from xlstm_engine.models import ChunkConfig, ModelConfig, Precision, ff_hidden_dim


def test_seven_b_preset():
    cfg = ModelConfig.xlstm_7b()
    assert (cfg.vocab_size, cfg.num_blocks, cfg.d_model, cfg.num_heads) == (50257, 32, 4096, 8)
    assert (cfg.gate_cap, cfg.logit_cap, cfg.igate_bias_init) == (15.0, 30.0, -10.0)
    assert cfg.config_id == "b32-d4096-h8-v50257"


def test_feedforward_width_rounds_up():
    assert ff_hidden_dim(4096, 2.66) == 10944
    assert ff_hidden_dim(128, 2.66) == 384
    assert ff_hidden_dim(64, 1.0) == 64


@pytest.mark.parametrize(
    "changes",
    [
        {"d_model": 30, "num_heads": 4},  # not divisible
        {"d_model": 12, "num_heads": 4},  # odd head width
        {"logit_cap": 0.0},
        {"eod_token_id": 50257},
        {"chunk_size": 0},
        {"vocab_size": 0},
        {"num_layers": 3},
    ],
)
def test_invalid_model_configs(changes):
    with pytest.raises(ValidationError):
        ModelConfig.xlstm_7b(**changes)


def test_model_config_is_frozen():
    cfg = ModelConfig.desk()
    with pytest.raises(ValidationError):
        cfg.d_model = 256


def test_precision():
    assert ModelConfig.desk(precision="float64").precision is Precision.FLOAT64
    assert ChunkConfig().chunk_size == 64


def test_config_file_round_trip(tmp_path):
    cfg = ModelConfig.desk(use_bias=False, precision="float64", chunk_size=16)
    path = tmp_path / "desk.cfg"
    write_model_config(cfg, path)
    assert "use_bias = false" in path.read_text()
    assert read_model_config(path) == cfg


def test_config_file_without_eod(tmp_path):
    cfg = ModelConfig(vocab_size=10, num_blocks=1, d_model=8, num_heads=2)
    path = tmp_path / "plain.cfg"
    write_model_config(cfg, path)
    assert read_model_config(path).eod_token_id is None


def test_config_file_comments_and_errors(tmp_path):
    path = tmp_path / "model.cfg"
    path.write_text("# tiny\nvocab_size = 10\nnum_blocks = 1  # one block\nd_model = 8\nnum_heads = 2\n")
    assert read_model_config(path).num_blocks == 1

    path.write_text("vocab_size 10\n")
    with pytest.raises(ConfigurationError, match="key = value"):
        read_model_config(path)

    path.write_text("vocab_size = 10\nnum_blocks = 1\nd_model = 9\nnum_heads = 2\n")
    with pytest.raises(ConfigurationError):
        read_model_config(path)


def test_environment_defaults():
    assert config.DEFAULT_CHUNK_SIZE >= 1
    assert config.get_model_mode() in ("CHECKPOINT", "RANDOM-INIT")
    bench_cfg = config.get_bench_model_config()
    assert bench_cfg.d_model == config.BENCH_D_MODEL
    assert set(config.get_performance_config()) >= {"monitoring_enabled", "checked_mode", "bench"}


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
