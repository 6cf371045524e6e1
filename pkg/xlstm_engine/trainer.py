"""
Trainer Module
Desk-scale next-token training: AdamW with global-norm clipping, warmup /
decay / cooldown schedules, batch-size ramp-up, EOD state resets and
grad-norm spike monitoring.
"""
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from xlstm_engine.checkpoint import save_checkpoint
from xlstm_engine.config import config
from xlstm_engine.data import IGNORE_INDEX, TokenBatch
from xlstm_engine.errors import TrainingDivergedError
from xlstm_engine.models import ModelConfig, TrainConfig, TrainStepRecord
from xlstm_engine.performance import ThroughputTracker

logger = logging.getLogger(__name__)

GATE_PARAMETERS = (".igate.", ".fgate.")


def set_seed(seed: int, threads: Optional[int] = None):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if threads:
        torch.set_num_threads(threads)


def _decayed_lr(step: int, cfg: TrainConfig) -> float:
    frac = cfg.decay_target_frac
    span = cfg.target_step - cfg.warmup_steps
    if frac == 1.0 or span <= 0:
        return cfg.peak_lr
    elapsed = step - cfg.warmup_steps
    if cfg.schedule == "exponential":
        rate = math.log(1.0 / frac) / span
        return cfg.peak_lr * math.exp(-rate * elapsed)
    progress = min(1.0, elapsed / span)
    return cfg.peak_lr * (frac + (1.0 - frac) * 0.5 * (1.0 + math.cos(math.pi * progress)))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, exponential or cosine decay, then linear cooldown to 0 at total_steps."""
    if step >= cfg.total_steps:
        return 0.0
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    cooldown_start = cfg.total_steps - cfg.cooldown_steps
    if cfg.cooldown_steps and step >= cooldown_start:
        return _decayed_lr(cooldown_start, cfg) * (cfg.total_steps - step) / cfg.cooldown_steps
    return _decayed_lr(step, cfg)


def batch_size_at(step: int, cfg: TrainConfig) -> int:
    size = cfg.batch_size
    for start, ramp_size in cfg.batch_ramp:
        if step >= start:
            size = ramp_size
    return size


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with weight decay on matrix weights only (norms, biases and gates excluded)."""
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        is_gate = any(tag in f".{name}" for tag in GATE_PARAMETERS)
        (decay if param.ndim >= 2 and not is_gate else no_decay).append(param)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(
        [g for g in groups if g["params"]],
        lr=cfg.peak_lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
    )


def adamw_step(
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    step: Optional[int] = None,
    lr: Optional[float] = None,
) -> float:
    """Clip gradients to cfg.clip_norm, then apply one AdamW update; returns the pre-clip norm."""
    params = [p for group in optimizer.param_groups for p in group["params"] if p.grad is not None]
    grad_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)) if params else 0.0
    lr = lr if lr is not None else lr_at(step or 0, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return grad_norm


def compute_loss(model: torch.nn.Module, batch: TokenBatch, mode: str = "chunkwise") -> torch.Tensor:
    """Mean next-token cross-entropy over non-ignored targets, with EOD resets."""
    logits, _ = model(batch.tokens, mode=mode, reset_mask=batch.reset_mask)
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        batch.targets.reshape(-1),
        ignore_index=IGNORE_INDEX,
    )


class TrainLog:
    """Per-step training series with trailing-window grad-norm statistics"""

    def __init__(self, window: int = 50):
        self.window = window
        self.records: List[TrainStepRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: TrainStepRecord):
        self.records.append(record)

    @property
    def max_column(self) -> str:
        return f"grad_norm_max{self.window}"

    @property
    def mean_column(self) -> str:
        return f"grad_norm_mean{self.window}"

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([r.model_dump() for r in self.records])
        if frame.empty:
            return pd.DataFrame(columns=["step", "loss", "ppl", "lr", "grad_norm", self.max_column, self.mean_column])
        rolling = frame["grad_norm"].rolling(self.window, min_periods=1)
        frame[self.max_column] = rolling.max()
        frame[self.mean_column] = rolling.mean()
        return frame

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        columns = ["step", "loss", "ppl", "lr", "grad_norm", self.max_column, self.mean_column]
        self.to_frame()[columns].to_csv(path, index=False)
        return path

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    @property
    def grad_norms(self) -> List[float]:
        return [r.grad_norm for r in self.records]

    @property
    def max_windowed_grad_norm(self) -> float:
        frame = self.to_frame()
        return float(frame[self.max_column].max()) if len(frame) else 0.0


@dataclass
class TrainResult:
    log: TrainLog
    checkpoint_path: Optional[Path] = None


def train(
    model: torch.nn.Module,
    loader,
    train_cfg: TrainConfig,
    model_cfg: Optional[ModelConfig] = None,
    show_progress: Optional[bool] = None,
) -> TrainResult:
    """Run train_cfg.total_steps optimizer steps on batches from `loader.next_batch(batch_size)`."""
    model_cfg = model_cfg or model.cfg
    set_seed(train_cfg.seed)
    optimizer = build_optimizer(model, train_cfg)
    log = TrainLog(train_cfg.log_window)
    show_progress = config.TRAIN_PROGRESS_BAR if show_progress is None else show_progress

    logger.info(
        f"🚀 Training {model_cfg.config_id} for {train_cfg.total_steps} steps "
        f"(peak lr {train_cfg.peak_lr}, {train_cfg.schedule} schedule)"
    )
    model.train()
    tokens_seen = 0
    steps = tqdm(range(train_cfg.total_steps), desc="train", unit="step", disable=not show_progress)

    with ThroughputTracker("train") as tracker:
        for step in steps:
            batch_size = batch_size_at(step, train_cfg)
            batch = loader.next_batch(batch_size)
            loss = compute_loss(model, batch, mode="chunkwise")
            loss_value = float(loss)
            if not math.isfinite(loss_value):
                logger.error(f"❌ Non-finite loss {loss_value} at step {step}")
                raise TrainingDivergedError(step, loss_value, log)

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            lr = lr_at(step, train_cfg)
            grad_norm = adamw_step(optimizer, train_cfg, lr=lr)

            tokens_seen += batch.num_tokens
            tracker.increment(batch.num_tokens)
            log.append(
                TrainStepRecord(
                    step=step,
                    loss=loss_value,
                    ppl=math.exp(min(loss_value, 700.0)),
                    lr=lr,
                    grad_norm=grad_norm,
                    batch_size=batch_size,
                    tokens_seen=tokens_seen,
                )
            )
            steps.set_postfix(loss=f"{loss_value:.4f}", gnorm=f"{grad_norm:.3f}")
            if step % config.TRAIN_LOG_EVERY == 0:
                logger.info(f"📈 step {step}: loss {loss_value:.4f} lr {lr:.2e} grad-norm {grad_norm:.3f}")

    logger.info(f"✅ Training finished: final loss {log.losses[-1]:.4f}, {tracker.items_per_second:.0f} tokens/s")

    checkpoint_path = None
    if train_cfg.checkpoint_path:
        checkpoint_path = save_checkpoint(model, model_cfg, train_cfg.checkpoint_path)
    return TrainResult(log, checkpoint_path)
