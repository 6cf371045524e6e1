import asyncio
import logging
import uuid
from datetime import datetime

import torch
from fastapi import FastAPI, HTTPException

from xlstm_engine.analysis import cost_report
from xlstm_engine.checkpoint import load_checkpoint
from xlstm_engine.config import config, configure_logging, read_model_config
from xlstm_engine.data import BYTE_VOCAB_SIZE, decode_tokens, encode_text
from xlstm_engine.errors import ConfigurationError, NonFiniteError, XLSTMError
from xlstm_engine.model import build_model, decode
from xlstm_engine.models import (
    CostReport,
    GenerateRequest,
    GenerateResponse,
    ModelConfig,
    SessionCreateRequest,
    SessionInfo,
)
from xlstm_engine.performance import Stopwatch, performance_monitor, track_performance

configure_logging()
logger = logging.getLogger(__name__)


def load_service_model():
    """Checkpoint from MODEL_CHECKPOINT if present, else a randomly initialized model"""
    if config.get_model_mode() == "CHECKPOINT":
        model, cfg = load_checkpoint(config.MODEL_CHECKPOINT)
    else:
        cfg = read_model_config(config.MODEL_CONFIG_FILE) if config.MODEL_CONFIG_FILE else ModelConfig.desk()
        torch.manual_seed(config.SEED)
        model = build_model(cfg)
    logger.info(f"🚀 Serving {cfg.config_id} ({config.get_model_mode()})")
    return model.eval(), cfg


app = FastAPI(
    title="xLSTM Inference Service",
    description="Prefill prompts into recurrent sessions and continue them token by token",
    version="1.0.0"
)

model, model_config = load_service_model()

sessions = {}


def _http_error(error: XLSTMError) -> HTTPException:
    status = 422 if isinstance(error, NonFiniteError) else 400
    return HTTPException(status_code=status, detail=str(error))


def _session_or_404(session_id: str) -> dict:
    if session_id not in sessions:
        raise HTTPException(status_code=404, detail="Session not found")
    return sessions[session_id]


def _session_info(session: dict) -> SessionInfo:
    return SessionInfo(
        session_id=session["id"],
        created_at=session["created_at"],
        position=session["state"].position,
        prompt_tokens=session["prompt_tokens"],
        generated_tokens=session["generated_tokens"],
        state_bytes=session["state"].nbytes,
        prefill_time_ms=session["prefill_time_ms"],
    )


def _prompt_tokens(request: SessionCreateRequest) -> torch.Tensor:
    if request.tokens:
        return torch.tensor(request.tokens, dtype=torch.long)
    if request.text:
        if model_config.vocab_size < BYTE_VOCAB_SIZE - 1:
            raise HTTPException(status_code=400, detail="Served model has no byte-level vocabulary; send token ids")
        return torch.as_tensor(encode_text(request.text).astype("int64"))
    raise HTTPException(status_code=400, detail="Provide a non-empty 'text' or 'tokens' prompt")


@app.get("/")
async def root():
    """Root endpoint to verify the service is running"""
    return {
        "message": "xLSTM Inference Service v1.0",
        "model_mode": config.get_model_mode(),
        "model": model_config.model_dump(mode="json"),
        "endpoints": {
            "sessions": "/sessions",
            "generate": "/sessions/{session_id}/generate",
            "analyze": "/analyze",
            "metrics": "/metrics",
            "docs": "/docs"
        },
        "active_sessions": len(sessions),
        "performance_enabled": config.ENABLE_PERFORMANCE_MONITORING
    }


@app.post("/sessions", response_model=SessionInfo)
@track_performance("prefill_endpoint_ms")
async def create_session(request: SessionCreateRequest):
    """
    Prefill a prompt in chunkwise mode. The session keeps the resulting
    recurrent state and the logits for the next token.
    """
    if len(sessions) >= config.MAX_SESSIONS:
        raise HTTPException(status_code=429, detail=f"Session limit of {config.MAX_SESSIONS} reached")

    with performance_monitor.track_request():
        tokens = _prompt_tokens(request)
        try:
            with torch.no_grad(), Stopwatch() as sw:
                logits, state = model(tokens[None, :], mode="chunkwise")
        except XLSTMError as e:
            raise _http_error(e)

        session_id = str(uuid.uuid4())
        sessions[session_id] = {
            "id": session_id,
            "created_at": datetime.now().isoformat(),
            "state": state,
            "next_logits": logits[:, -1],
            "prompt_tokens": len(tokens),
            "generated_tokens": 0,
            "prefill_time_ms": sw.ms,
            "lock": asyncio.Lock(),
        }
        performance_monitor.record_metric(
            "prefill_tokens_per_sec",
            len(tokens) / sw.seconds if sw.seconds > 0 else 0.0,
            {"prompt_tokens": len(tokens)}
        )
        logger.info(f"✅ Session {session_id} prefilled {len(tokens)} tokens in {sw.ms:.1f}ms")
        return _session_info(sessions[session_id])


@app.post("/sessions/{session_id}/generate", response_model=GenerateResponse)
@track_performance("generate_endpoint_ms")
async def generate_tokens(session_id: str, request: GenerateRequest):
    """Continue a session with recurrent decoding; every emitted token is fed back into its state"""
    session = _session_or_404(session_id)
    if request.n_tokens > config.MAX_NEW_TOKENS:
        raise HTTPException(status_code=400, detail=f"n_tokens exceeds MAX_NEW_TOKENS={config.MAX_NEW_TOKENS}")

    with performance_monitor.track_request():
        async with session["lock"]:
            generator = torch.Generator().manual_seed(request.seed)
            try:
                with Stopwatch() as sw:
                    result = decode(
                        model, session["state"], session["next_logits"], request.n_tokens, request.temperature, generator
                    )
            except XLSTMError as e:
                raise _http_error(e)
            session["state"] = result.state
            session["next_logits"] = result.next_logits
            session["generated_tokens"] += request.n_tokens

        tokens = result.token_list
        tokens_per_sec = len(tokens) / sw.seconds if tokens and sw.seconds > 0 else 0.0
        performance_monitor.record_metric("decode_tokens_per_sec", tokens_per_sec, {"n_tokens": len(tokens)})

        return GenerateResponse(
            session_id=session_id,
            tokens=tokens,
            text=decode_tokens(tokens) if model_config.vocab_size == BYTE_VOCAB_SIZE else None,
            position=result.state.position,
            decode_time_ms=sw.ms,
            tokens_per_sec=tokens_per_sec,
            state_bytes=result.state.nbytes,
        )


@app.get("/sessions/{session_id}", response_model=SessionInfo)
async def get_session_info(session_id: str):
    """Get position and state size of a session"""
    return _session_info(_session_or_404(session_id))


@app.delete("/sessions/{session_id}")
async def delete_session(session_id: str):
    _session_or_404(session_id)
    del sessions[session_id]
    return {"message": f"Session {session_id} deleted"}


@app.get("/analyze", response_model=CostReport)
async def analyze(seq_len: int = 8192, chunk_size: int = 64):
    """Closed-form cost report of the served configuration"""
    try:
        return cost_report(model_config, seq_len, chunk_size)
    except ConfigurationError as e:
        raise HTTPException(status_code=400, detail=str(e))


@app.get("/metrics")
async def get_performance_metrics():
    """Get comprehensive performance metrics"""
    return {
        "metrics": performance_monitor.get_all_metrics(),
        "config": config.get_performance_config(),
        "timestamp": datetime.now().isoformat()
    }
