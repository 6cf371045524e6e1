import pandas as pd
import pytest

from xlstm_engine import bench
from xlstm_engine.analysis import state_size_bytes
from xlstm_engine.config import config
from xlstm_engine.models import ModelConfig
from xlstm_engine.performance import performance_monitor

CFG = ModelConfig(vocab_size=17, num_blocks=2, d_model=16, num_heads=2, chunk_size=4)
# per cached token: 2 blocks x 2 heads x (d_qk 4 + d_hv 8) x 4 bytes
KV_BYTES_PER_TOKEN = 2 * 2 * 12 * 4


@pytest.fixture(scope="module")
def models():
    return bench.BenchModels(CFG, seed=0)


def test_analytic_memory_rows():
    rows = bench.bench_memory(CFG, [10, 100], measure=False)
    by_kind = {(r.model_kind, r.gen_len): r for r in rows}
    assert by_kind["mlstm", 10].peak_state_bytes == by_kind["mlstm", 100].peak_state_bytes == state_size_bytes(CFG)
    # start token + generated tokens, K and V per block
    assert by_kind["attention", 10].peak_state_bytes == 2 * 2 * 16 * 4 * 11
    assert by_kind["attention", 100].peak_state_bytes == 2 * 2 * 16 * 4 * 101
    assert all(r.measured_state_bytes == 0 for r in rows)


def test_measured_memory_is_flat_for_mlstm_and_linear_for_attention(models):
    rows = bench.bench_memory(CFG, [10, 30], models=models)
    by_kind = {(r.model_kind, r.gen_len): r for r in rows}
    assert by_kind["mlstm", 10].measured_state_bytes == by_kind["mlstm", 30].measured_state_bytes
    grown = by_kind["attention", 30].measured_state_bytes - by_kind["attention", 10].measured_state_bytes
    assert grown == 20 * KV_BYTES_PER_TOKEN
    assert all(r.tokens_sha and r.repeats == 1 for r in rows)


def test_generate_rows(models):
    rows = bench.bench_generate(CFG, [0, 8], gen_len=5, repeats=1, warmups=0, models=models)
    assert [(r.model_kind, r.prefill_len) for r in rows] == [
        ("mlstm", 0), ("mlstm", 8), ("attention", 0), ("attention", 8)
    ]
    for row in rows:
        assert row.status == "ok" and row.scenario == "generate"
        assert row.per_token_s > 0 and row.tokens_per_sec > 0
        assert row.per_token_s == pytest.approx(row.wall_time_s / 5)
        assert len(row.tokens_sha) == 16
    assert rows[0].peak_state_bytes == state_size_bytes(CFG)
    assert performance_monitor.get_stats("bench_mlstm_decode_per_token_ms")["count"] >= 2


def test_generated_tokens_are_reproducible(models):
    a = bench.bench_generate(CFG, [8], gen_len=6, repeats=1, warmups=0, models=models)
    b = bench.bench_generate(CFG, [8], gen_len=6, repeats=2, warmups=1, seed=0)
    assert [r.tokens_sha for r in a] == [r.tokens_sha for r in b]


def test_time_to_first_token(models):
    rows = bench.bench_ttft(CFG, [4], first_n=1, repeats=1, warmups=0, models=models)
    for row in rows:
        assert row.scenario == "ttft1" and row.gen_len == 1
        assert row.wall_time_s == pytest.approx(row.prefill_time_s + row.per_token_s)


def test_prefill_grid(models):
    rows = bench.bench_prefill(CFG, 32, [(1, 16), (2, 8)], repeats=1, warmups=0, models=models)
    assert [(r.model_kind, r.batch, r.prefill_len) for r in rows] == [
        ("mlstm", 1, 16), ("mlstm", 2, 8), ("attention", 1, 16), ("attention", 2, 8)
    ]
    assert all(r.tokens_per_sec > 0 and r.gen_len == 0 for r in rows)


def test_out_of_memory_becomes_a_row(models, monkeypatch):
    def exhausted(*args, **kwargs):
        raise RuntimeError("CUDA out of memory. Tried to allocate 2.00 GiB")

    monkeypatch.setattr(bench, "_prefill_then_decode", exhausted)
    rows = bench.bench_generate(CFG, [8], gen_len=3, repeats=1, warmups=0, models=models)
    assert [r.status for r in rows] == ["oom", "oom"]
    assert "out of memory" in rows[0].error


def test_other_errors_propagate(models, monkeypatch):
    def broken(*args, **kwargs):
        raise RuntimeError("shape mismatch")

    monkeypatch.setattr(bench, "_prefill_then_decode", broken)
    with pytest.raises(RuntimeError, match="shape mismatch"):
        bench.bench_generate(CFG, [8], gen_len=3, repeats=1, warmups=0, models=models)


def test_results_append_with_one_header(tmp_path):
    rows = bench.bench_memory(CFG, [10], measure=False)
    path = tmp_path / "runs" / "memory.csv"
    bench.write_results(rows, path)
    bench.write_results(rows, path)
    assert path.read_text().count("scenario,") == 1
    frame = pd.read_csv(path)
    assert len(frame) == 4
    assert set(frame["model_kind"]) == {"mlstm", "attention"}


def test_decode_does_not_grow_memory(models):
    samples = bench.decode_allocation_profile(models.models["mlstm"], n_tokens=300, checkpoints=(10, 300))
    growth_mb = (samples[300] - samples[10]) / 2**20
    assert growth_mb < config.DECODE_ALLOC_THRESHOLD_MB


@pytest.fixture(scope="module")
def desk_models():
    return bench.BenchModels(config.get_bench_model_config(), seed=0)


@pytest.mark.slow
def test_decode_cost_over_prefill_lengths(desk_models):
    cfg = config.get_bench_model_config()
    rows = bench.bench_generate(cfg, [0, 512, 4096], 100, repeats=3, warmups=1, models=desk_models)
    per_token = {(r.model_kind, r.prefill_len): r.per_token_s for r in rows}
    assert all(r.status == "ok" for r in rows)

    mlstm = [per_token["mlstm", n] for n in (0, 512, 4096)]
    assert max(mlstm) / min(mlstm) < 1.2
    assert per_token["attention", 4096] > 2 * per_token["attention", 0]


@pytest.mark.slow
def test_prefill_throughput_over_context_lengths(desk_models):
    cfg = config.get_bench_model_config()
    grid = [(16, 256), (4, 1024), (2, 2048)]
    rows = bench.bench_prefill(cfg, 4096, grid, repeats=3, warmups=1, models=desk_models)
    throughput = {kind: [r.tokens_per_sec for r in rows if r.model_kind == kind] for kind in ("mlstm", "attention")}

    assert max(throughput["mlstm"]) / min(throughput["mlstm"]) < 1.3
    attention = throughput["attention"]
    assert all(a > b for a, b in zip(attention, attention[1:]))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
