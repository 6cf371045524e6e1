"""
Command-line entry point: inference benchmarks, cost analysis, desk-scale
training, token-file ingestion and the inference service.

    python -m xlstm_engine generate --prefill-lens 0,512,4096 --gen-len 100
    python -m xlstm_engine analyze --preset xlstm-7b --heads 4,8,16,32
    python -m xlstm_engine train --synthetic spiky --steps 300 --output runs/train.csv

Failures print one JSON line on stderr and exit nonzero (2 for configuration
errors, 1 otherwise).
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch

from xlstm_engine import analysis, bench
from xlstm_engine.config import config, configure_logging, read_model_config
from xlstm_engine.data import (
    PackedBatchLoader,
    TokenFile,
    ingest_text,
    repeated_text_sample,
    spiky_stream,
)
from xlstm_engine.errors import ConfigurationError
from xlstm_engine.models import ModelConfig, Precision, TrainConfig

logger = logging.getLogger(__name__)

PRESETS = {
    "xlstm-7b": ModelConfig.xlstm_7b,
    "desk": ModelConfig.desk,
    "bench": config.get_bench_model_config,
}


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _grid(text: str):
    cells = []
    for cell in text.split(","):
        try:
            batch, ctx = cell.lower().split("x")
            cells.append((int(batch), int(ctx)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected BATCHxCTX cells, got '{cell}'")
    return cells


def _model_config(args, default: str) -> ModelConfig:
    if args.config:
        cfg = read_model_config(args.config)
    else:
        cfg = PRESETS[getattr(args, "preset", None) or default]()
    if args.precision:
        cfg = ModelConfig(**{**cfg.model_dump(), "precision": Precision(args.precision)})
    return cfg


def _output(args, name: str) -> Path:
    return Path(args.output) if args.output else config.RUNS_DIR / f"{name}.csv"


def cmd_generate(args) -> int:
    cfg = _model_config(args, "bench")
    rows = bench.bench_generate(
        cfg, args.prefill_lens, args.gen_len, args.repeats, args.warmups, args.batch, args.seed
    )
    print(analysis.format_table(bench.results_frame(rows)))
    bench.write_results(rows, _output(args, "generate"))
    return 0


def cmd_ttft(args) -> int:
    cfg = _model_config(args, "bench")
    rows = bench.bench_ttft(cfg, args.prefill_lens, args.first_n, args.repeats, args.warmups, args.seed)
    print(analysis.format_table(bench.results_frame(rows)))
    bench.write_results(rows, _output(args, f"ttft{args.first_n}"))
    return 0


def cmd_prefill(args) -> int:
    cfg = _model_config(args, "bench")
    rows = bench.bench_prefill(cfg, args.total_tokens, args.grid, args.repeats, args.warmups, args.seed)
    print(analysis.format_table(bench.results_frame(rows)))
    bench.write_results(rows, _output(args, "prefill"))
    return 0


def cmd_memory(args) -> int:
    cfg = _model_config(args, "bench")
    rows = bench.bench_memory(cfg, args.gen_lens, args.prefill_len, seed=args.seed, measure=not args.analytic_only)
    print(analysis.format_table(bench.results_frame(rows)))
    bench.write_results(rows, _output(args, "memory"))
    return 0


def cmd_analyze(args) -> int:
    cfg = _model_config(args, "xlstm-7b")
    if args.heads:
        frame = analysis.head_sweep(cfg, args.heads, args.seq_len, args.chunk_size)
        name = "head_sweep"
    else:
        frame = analysis.reports_frame([analysis.cost_report(cfg, args.seq_len, args.chunk_size)])
        name = "cost_report"
    print(analysis.format_table(frame))
    analysis.write_csv(frame, _output(args, name))
    return 0


def _train_loader(args, cfg: ModelConfig, train_cfg: TrainConfig):
    if args.data:
        tokens = TokenFile(args.data).tokens
        return PackedBatchLoader(tokens, train_cfg.context_length, cfg.eod_token_id, seed=args.seed)
    if args.synthetic == "repeated":
        sample = repeated_text_sample(length=train_cfg.context_length + 1)
        return PackedBatchLoader(sample, train_cfg.context_length, None, seed=args.seed, shuffle=False)
    stream = spiky_stream(
        max(64 * (train_cfg.context_length + 1), 65536),
        vocab_size=cfg.vocab_size,
        eod_id=cfg.eod_token_id if cfg.eod_token_id is not None else cfg.vocab_size - 1,
        seed=args.seed,
    )
    return PackedBatchLoader(stream, train_cfg.context_length, cfg.eod_token_id, seed=args.seed)


def cmd_train(args) -> int:
    from xlstm_engine.model import build_model
    from xlstm_engine.trainer import set_seed, train

    cfg = _model_config(args, "desk")
    if args.no_softcap:
        cfg = ModelConfig(**{**cfg.model_dump(), "gate_softcap": False, "logit_softcap": False})
    train_cfg = TrainConfig(
        peak_lr=args.lr,
        warmup_steps=args.warmup,
        total_steps=args.steps,
        schedule=args.schedule,
        decay_target_frac=args.decay_frac,
        cooldown_steps=args.cooldown,
        batch_size=args.batch_size,
        context_length=args.context_length,
        seed=args.seed,
        log_window=config.TRAIN_LOG_WINDOW,
        checkpoint_path=args.checkpoint,
    )
    set_seed(args.seed, threads=args.threads)
    model = build_model(cfg)
    result = train(model, _train_loader(args, cfg, train_cfg), train_cfg, cfg, show_progress=args.progress)
    path = result.log.to_csv(_output(args, "train"))
    logger.info(f"📝 Wrote training log to {path}")
    print(json.dumps({
        "final_loss": result.log.losses[-1],
        "max_windowed_grad_norm": result.log.max_windowed_grad_norm,
        "checkpoint": str(result.checkpoint_path) if result.checkpoint_path else None,
    }))
    return 0


def cmd_ingest(args) -> int:
    token_file = ingest_text(args.inputs, args.prefix)
    print(json.dumps({
        "prefix": str(args.prefix),
        "documents": token_file.num_documents,
        "tokens": len(token_file),
    }))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("xlstm_engine.main:app", host=args.host, port=args.port, log_level=config.LOG_LEVEL.lower())
    return 0


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="flat key = value model config file")
    parser.add_argument("--precision", choices=[p.value for p in Precision])
    parser.add_argument("--seed", type=int, default=config.SEED)
    parser.add_argument("--threads", type=int, default=config.NUM_THREADS)
    parser.add_argument("--output", help="CSV output path (default: runs/<scenario>.csv)")


def _add_bench_timing(parser: argparse.ArgumentParser):
    parser.add_argument("--repeats", type=int, default=config.BENCH_REPEATS)
    parser.add_argument("--warmups", type=int, default=config.BENCH_WARMUPS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xlstm_engine", description="xLSTM mLSTM engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generation throughput over prefill lengths")
    _add_common(p)
    _add_bench_timing(p)
    p.add_argument("--prefill-lens", type=_int_list, default=[0, 512, 4096])
    p.add_argument("--gen-len", type=int, default=100)
    p.add_argument("--batch", type=int, default=1)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("ttft", help="time to the first 1 or 100 tokens")
    _add_common(p)
    _add_bench_timing(p)
    p.add_argument("--prefill-lens", type=_int_list, default=[0, 512, 4096])
    p.add_argument("--first-n", type=int, choices=[1, 100], default=1)
    p.set_defaults(handler=cmd_ttft)

    p = sub.add_parser("prefill", help="prefill throughput over a batch x context grid")
    _add_common(p)
    _add_bench_timing(p)
    p.add_argument("--total-tokens", type=int, default=8192)
    p.add_argument("--grid", type=_grid, default=[(1, 512), (2, 256), (4, 128), (8, 64)])
    p.set_defaults(handler=cmd_prefill)

    p = sub.add_parser("memory", help="recurrent state vs. KV-cache bytes over generation lengths")
    _add_common(p)
    p.add_argument("--gen-lens", type=_int_list, default=[100, 1000, 4000])
    p.add_argument("--prefill-len", type=int, default=0)
    p.add_argument("--analytic-only", action="store_true")
    p.set_defaults(handler=cmd_memory)

    p = sub.add_parser("analyze", help="closed-form FLOPs, parameters and state size")
    _add_common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seq-len", type=int, default=8192)
    p.add_argument("--chunk-size", type=int, default=64)
    p.add_argument("--heads", type=_int_list, help="sweep these head counts instead of one report")
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("train", help="desk-scale next-token training")
    _add_common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--data", help="token file prefix written by `ingest`")
    p.add_argument("--synthetic", choices=["spiky", "repeated"], default="spiky")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--warmup", type=int, default=30)
    p.add_argument("--cooldown", type=int, default=0)
    p.add_argument("--schedule", choices=["exponential", "cosine"], default="exponential")
    p.add_argument("--decay-frac", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--context-length", type=int, default=128)
    p.add_argument("--no-softcap", action="store_true")
    p.add_argument("--checkpoint")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("ingest", help="UTF-8 text files to a packed byte-level token file")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--prefix", required=True)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("serve", help="run the inference service")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(handler=cmd_serve)

    return parser


def _error_line(error: BaseException) -> str:
    return json.dumps({"error": type(error).__name__, "message": str(error)})


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None):
        torch.set_num_threads(args.threads)
    try:
        return args.handler(args)
    except (ConfigurationError, ValueError) as e:
        print(_error_line(e), file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"❌ {args.command} failed: {e}")
        print(_error_line(e), file=sys.stderr)
        return 1
