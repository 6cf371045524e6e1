"""
Inference benchmarks at desk scale: generation throughput over prefill
lengths, time to first token(s), prefill throughput over a (batch, context)
grid and state/KV-cache memory over generation lengths.

Every scenario returns BenchResult rows (median over repeats, warmups
excluded) for the mLSTM model and the attention comparator.
"""
import hashlib
import logging
import statistics
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd
import torch

from xlstm_engine.analysis import state_size_bytes, transformer_kv_cache_bytes
from xlstm_engine.config import config
from xlstm_engine.model import build_comparator, build_model, decode
from xlstm_engine.models import BenchResult, ModelConfig
from xlstm_engine.performance import Stopwatch, performance_monitor, rss_bytes

logger = logging.getLogger(__name__)

MODEL_KINDS = ("mlstm", "attention")
START_TOKEN = 0


class BenchModels:
    """Both models built once from the same config and seed"""

    def __init__(self, cfg: ModelConfig, seed: int = 0, kinds: Sequence[str] = MODEL_KINDS):
        self.cfg = cfg
        self.models: Dict[str, torch.nn.Module] = {}
        for kind in kinds:
            torch.manual_seed(seed)
            model = build_model(cfg) if kind == "mlstm" else build_comparator(cfg)
            self.models[kind] = model.eval()

    def items(self):
        return self.models.items()


def _is_oom(error: BaseException) -> bool:
    return isinstance(error, MemoryError) or "out of memory" in str(error).lower()


def _prompt(cfg: ModelConfig, prefill_len: int, batch: int, seed: int) -> torch.Tensor:
    """Random prompt; prefill_len 0 starts from a single start token."""
    if prefill_len == 0:
        return torch.full((batch, 1), START_TOKEN, dtype=torch.long)
    generator = torch.Generator().manual_seed(seed)
    return torch.randint(0, cfg.vocab_size, (batch, prefill_len), generator=generator)


def _tokens_sha(tokens: torch.Tensor) -> str:
    return hashlib.sha256(tokens.numpy().astype("<i8").tobytes()).hexdigest()[:16]


def _median_runs(run: Callable[[], Tuple[float, float, dict]], repeats: int, warmups: int):
    for _ in range(warmups):
        run()
    prefill, generation, extra = [], [], {}
    for _ in range(repeats):
        p, g, extra = run()
        prefill.append(p)
        generation.append(g)
    return statistics.median(prefill), statistics.median(generation), extra


@torch.no_grad()
def _prefill_then_decode(model, prompt: torch.Tensor, gen_len: int) -> Tuple[float, float, dict]:
    with Stopwatch() as prefill:
        logits, state = model(prompt, mode="chunkwise")
    with Stopwatch() as generation:
        result = decode(model, state, logits[:, -1], gen_len)
    return prefill.seconds, generation.seconds, {"tokens": result.tokens, "state": result.state}


def _failure_row(scenario: str, cfg: ModelConfig, kind: str, error: BaseException, **fields) -> BenchResult:
    status = "oom" if _is_oom(error) else "error"
    logger.warning(f"⚠️ {scenario}/{kind} {fields} failed ({status}): {error}")
    return BenchResult(scenario=scenario, config_id=cfg.config_id, model_kind=kind, status=status, error=str(error), **fields)


def _analytic_state_bytes(kind: str, cfg: ModelConfig, tokens: int, batch: int) -> int:
    if kind == "mlstm":
        return state_size_bytes(cfg) * batch
    return transformer_kv_cache_bytes(cfg, tokens, batch)


def bench_generate(
    cfg: ModelConfig,
    prefill_lens: Iterable[int],
    gen_len: int = 100,
    repeats: Optional[int] = None,
    warmups: Optional[int] = None,
    batch: int = 1,
    seed: int = 0,
    models: Optional[BenchModels] = None,
    scenario: str = "generate",
) -> List[BenchResult]:
    """Chunkwise prefill, then timed token-by-token generation (KV-cache decode for attention)."""
    repeats = repeats or config.BENCH_REPEATS
    warmups = config.BENCH_WARMUPS if warmups is None else warmups
    models = models or BenchModels(cfg, seed)
    rows = []
    for kind, model in models.items():
        for prefill_len in prefill_lens:
            prompt = _prompt(cfg, prefill_len, batch, seed)
            fields = dict(prefill_len=prefill_len, gen_len=gen_len, batch=batch)
            try:
                prefill_s, gen_s, extra = _median_runs(
                    lambda: _prefill_then_decode(model, prompt, gen_len), repeats, warmups
                )
            except (RuntimeError, MemoryError) as e:
                if not _is_oom(e):
                    raise
                rows.append(_failure_row(scenario, cfg, kind, e, **fields))
                continue

            generated = gen_len * batch
            rows.append(
                BenchResult(
                    scenario=scenario,
                    config_id=cfg.config_id,
                    model_kind=kind,
                    wall_time_s=gen_s,
                    prefill_time_s=prefill_s,
                    tokens_per_sec=generated / gen_s if gen_len and gen_s > 0 else 0.0,
                    per_token_s=gen_s / gen_len if gen_len else 0.0,
                    peak_state_bytes=_analytic_state_bytes(kind, cfg, prompt.shape[1] + gen_len, batch),
                    measured_state_bytes=extra["state"].nbytes,
                    repeats=repeats,
                    tokens_sha=_tokens_sha(extra["tokens"]),
                    **fields,
                )
            )
            performance_monitor.record_metric(
                f"bench_{kind}_decode_per_token_ms", rows[-1].per_token_s * 1000, {"prefill_len": prefill_len}
            )
            logger.info(
                f"⏱️ {scenario} {kind} prefill={prefill_len}: {rows[-1].tokens_per_sec:.1f} tokens/s, "
                f"prefill {prefill_s * 1000:.1f}ms"
            )
    return rows


def bench_ttft(
    cfg: ModelConfig,
    prefill_lens: Iterable[int],
    first_n: int = 1,
    repeats: Optional[int] = None,
    warmups: Optional[int] = None,
    seed: int = 0,
    models: Optional[BenchModels] = None,
) -> List[BenchResult]:
    """Latency to the first `first_n` tokens: wall_time_s = prefill + first_n decode steps."""
    rows = bench_generate(
        cfg, prefill_lens, first_n, repeats, warmups, seed=seed, models=models, scenario=f"ttft{first_n}"
    )
    for row in rows:
        if row.status == "ok":
            row.wall_time_s = row.prefill_time_s + row.per_token_s * row.gen_len
    return rows


def bench_prefill(
    cfg: ModelConfig,
    total_tokens: int,
    grid: Iterable[Tuple[int, int]],
    repeats: Optional[int] = None,
    warmups: Optional[int] = None,
    seed: int = 0,
    models: Optional[BenchModels] = None,
) -> List[BenchResult]:
    """Process a fixed token budget as (batch, ctx) prompts; throughput per grid cell."""
    repeats = repeats or config.BENCH_REPEATS
    warmups = config.BENCH_WARMUPS if warmups is None else warmups
    models = models or BenchModels(cfg, seed)
    rows = []
    for kind, model in models.items():
        for batch, ctx in grid:
            n_calls = max(1, total_tokens // (batch * ctx))
            prompt = _prompt(cfg, ctx, batch, seed)
            fields = dict(prefill_len=ctx, gen_len=0, batch=batch)

            @torch.no_grad()
            def run():
                with Stopwatch() as sw:
                    for _ in range(n_calls):
                        model(prompt, mode="chunkwise")
                return sw.seconds, 0.0, {}

            try:
                seconds, _, _ = _median_runs(run, repeats, warmups)
            except (RuntimeError, MemoryError) as e:
                if not _is_oom(e):
                    raise
                rows.append(_failure_row("prefill", cfg, kind, e, **fields))
                continue

            processed = n_calls * batch * ctx
            rows.append(
                BenchResult(
                    scenario="prefill",
                    config_id=cfg.config_id,
                    model_kind=kind,
                    prefill_time_s=seconds / n_calls,
                    wall_time_s=seconds,
                    tokens_per_sec=processed / seconds if seconds > 0 else 0.0,
                    peak_state_bytes=_analytic_state_bytes(kind, cfg, ctx, batch),
                    repeats=repeats,
                    **fields,
                )
            )
    return rows


@torch.no_grad()
def bench_memory(
    cfg: ModelConfig,
    gen_lens: Iterable[int],
    prefill_len: int = 0,
    batch: int = 1,
    seed: int = 0,
    measure: bool = True,
    models: Optional[BenchModels] = None,
) -> List[BenchResult]:
    """
    Analytic state bytes (mLSTM: constant; attention: 2 x blocks x d_model x 4 per
    cached token) and, with measure=True, the bytes actually held by the state.
    """
    models = models or (BenchModels(cfg, seed) if measure else None)
    rows = []
    for kind in MODEL_KINDS:
        for gen_len in gen_lens:
            prompt = _prompt(cfg, prefill_len, batch, seed)
            cached = prompt.shape[1] + gen_len
            row = BenchResult(
                scenario="memory",
                config_id=cfg.config_id,
                model_kind=kind,
                prefill_len=prefill_len,
                gen_len=gen_len,
                batch=batch,
                peak_state_bytes=_analytic_state_bytes(kind, cfg, cached, batch),
            )
            if measure and kind in models.models:
                model = models.models[kind]
                rss_before = rss_bytes()
                try:
                    with Stopwatch() as sw:
                        logits, state = model(prompt, mode="chunkwise")
                        result = decode(model, state, logits[:, -1], gen_len)
                except (RuntimeError, MemoryError) as e:
                    if not _is_oom(e):
                        raise
                    rows.append(_failure_row("memory", cfg, kind, e, prefill_len=prefill_len, gen_len=gen_len, batch=batch))
                    continue
                row.measured_state_bytes = result.state.nbytes
                row.rss_delta_bytes = max(0, rss_bytes() - rss_before)
                row.wall_time_s = sw.seconds
                row.repeats = 1
                row.tokens_sha = _tokens_sha(result.tokens)
            rows.append(row)
    return rows


@torch.no_grad()
def decode_allocation_profile(model, n_tokens: int = 1000, checkpoints: Sequence[int] = (10, 1000)) -> Dict[int, int]:
    """Process RSS after decoding each checkpoint token count, starting from a one-token prompt."""
    prompt = torch.full((1, 1), START_TOKEN, dtype=torch.long)
    logits, state = model(prompt, mode="chunkwise")
    next_logits = logits[:, -1]
    samples = {}
    for i in range(1, n_tokens + 1):
        token = next_logits.argmax(-1)
        logits, state = model(token[:, None], state, mode="recurrent")
        next_logits = logits[:, -1]
        if i in checkpoints:
            samples[i] = rss_bytes()
    return samples


def results_frame(rows: List[BenchResult]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in rows])


def write_results(rows: List[BenchResult], path) -> Path:
    """Append rows to a CSV file (header written once)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = results_frame(rows)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)
    logger.info(f"📝 Wrote {len(frame)} benchmark rows to {path}")
    return path
