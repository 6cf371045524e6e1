import math
from enum import Enum
from typing import List, Literal, Optional, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator


class Precision(str, Enum):
    """Floating point precision modes"""
    FLOAT32 = "float32"
    FLOAT64 = "float64"

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32 if self is Precision.FLOAT32 else torch.float64


def ff_hidden_dim(d_model: int, proj_factor: float, multiple_of: int = 64) -> int:
    """round(proj_factor * d_model), rounded up to a multiple of `multiple_of`."""
    raw = round(proj_factor * d_model)
    return multiple_of * math.ceil(raw / multiple_of)


class ModelConfig(BaseModel):
    """Shape and stability settings of the xLSTM decoder stack"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    vocab_size: int = Field(gt=0)
    num_blocks: int = Field(ge=0)
    d_model: int = Field(gt=0)
    num_heads: int = Field(gt=0)
    ff_proj_factor: float = Field(default=2.66, gt=0)
    ff_multiple_of: int = Field(default=64, gt=0)
    gate_cap: float = 15.0
    logit_cap: float = 30.0
    gate_softcap: bool = True
    logit_softcap: bool = True
    norm_eps: float = Field(default=1e-6, gt=0)
    prenorm_type: Literal["rmsnorm", "layernorm"] = "rmsnorm"
    headnorm_type: Literal["layernorm", "rmsnorm"] = "layernorm"
    use_bias: bool = True
    igate_bias_init: float = -10.0
    igate_trainable: bool = True
    fgate_bias_min: float = 3.0
    fgate_bias_max: float = 6.0
    chunk_size: int = Field(default=64, gt=0)
    eod_token_id: Optional[int] = Field(default=None, ge=0)
    precision: Precision = Precision.FLOAT32

    @model_validator(mode="after")
    def check_shapes(self):
        if self.d_model % self.num_heads:
            raise ValueError(
                f"d_model {self.d_model} is not divisible by num_heads {self.num_heads}"
            )
        if (self.d_model // self.num_heads) % 2:
            raise ValueError(f"d_hv {self.d_model // self.num_heads} must be even")
        if self.gate_cap <= 0 or self.logit_cap <= 0:
            raise ValueError("gate_cap and logit_cap must be positive")
        if self.eod_token_id is not None and self.eod_token_id >= self.vocab_size:
            raise ValueError(f"eod_token_id {self.eod_token_id} >= vocab_size {self.vocab_size}")
        return self

    @property
    def d_hv(self) -> int:
        return self.d_model // self.num_heads

    @property
    def d_qk(self) -> int:
        return self.d_hv // 2

    @property
    def d_ff(self) -> int:
        return ff_hidden_dim(self.d_model, self.ff_proj_factor, self.ff_multiple_of)

    @property
    def dtype(self) -> torch.dtype:
        return self.precision.dtype

    @property
    def config_id(self) -> str:
        return f"b{self.num_blocks}-d{self.d_model}-h{self.num_heads}-v{self.vocab_size}"

    @classmethod
    def xlstm_7b(cls, **overrides) -> "ModelConfig":
        """The 7B configuration: 32 blocks, d_model 4096, 8 heads"""
        values = dict(vocab_size=50257, num_blocks=32, d_model=4096, num_heads=8)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Desk-scale training model over byte-level tokens (EOD = 256)"""
        values = dict(vocab_size=257, num_blocks=4, d_model=128, num_heads=2, eod_token_id=256)
        values.update(overrides)
        return cls(**values)


class ChunkConfig(BaseModel):
    """Chunk length of the chunkwise-parallel mode"""
    chunk_size: int = Field(default=64, ge=1)


class TrainConfig(BaseModel):
    """Optimizer, schedule and batching settings of a training run"""
    model_config = ConfigDict(extra="forbid")

    peak_lr: float = Field(default=5e-4, gt=0)
    beta1: float = 0.99
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = Field(default=0.1, ge=0)
    clip_norm: float = Field(default=0.5, gt=0)
    warmup_steps: int = Field(default=100, ge=0)
    total_steps: int = Field(default=1000, gt=0)
    schedule: Literal["exponential", "cosine"] = "exponential"
    decay_target_frac: float = Field(default=0.1, gt=0, le=1)
    decay_target_step: Optional[int] = None
    cooldown_steps: int = Field(default=0, ge=0)
    batch_size: int = Field(default=8, gt=0)
    batch_ramp: List[Tuple[int, int]] = Field(default_factory=list)
    context_length: int = Field(default=256, gt=0)
    seed: int = 0
    log_window: int = Field(default=50, gt=0)
    checkpoint_path: Optional[str] = None

    @model_validator(mode="after")
    def check_phases(self):
        if self.warmup_steps + self.cooldown_steps > self.total_steps:
            raise ValueError("warmup_steps + cooldown_steps exceeds total_steps")
        if self.target_step <= self.warmup_steps and self.decay_target_frac < 1:
            raise ValueError("decay_target_step must come after warmup")
        for start, size in self.batch_ramp:
            if start < 0 or size <= 0:
                raise ValueError(f"invalid batch ramp entry ({start}, {size})")
        self.batch_ramp = sorted(self.batch_ramp)
        return self

    @property
    def target_step(self) -> int:
        if self.decay_target_step is not None:
            return self.decay_target_step
        return self.total_steps - self.cooldown_steps

    @classmethod
    def pretraining_recipe(cls, **overrides) -> "TrainConfig":
        """7B pre-training recipe: exponential decay to 0.1 at step 500k, batch ramp-up"""
        values = dict(
            warmup_steps=3000,
            total_steps=550000,
            schedule="exponential",
            decay_target_frac=0.1,
            decay_target_step=500000,
            cooldown_steps=7000,
            batch_size=128,
            batch_ramp=[(0, 128), (2000, 256), (4000, 512)],
            context_length=8192,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def ablation_recipe(cls, **overrides) -> "TrainConfig":
        """Ablation recipe: cosine decay to 0.1 at step 75k, 1k cooldown"""
        values = dict(
            warmup_steps=3000,
            total_steps=76000,
            schedule="cosine",
            decay_target_frac=0.1,
            decay_target_step=75000,
            cooldown_steps=1000,
            batch_size=256,
            context_length=8192,
        )
        values.update(overrides)
        return cls(**values)


class FlopFactors(BaseModel):
    """Per-op FLOP cost factors for non multiply-accumulate ops"""
    f_exp: int = Field(default=1, ge=0)
    f_max: int = Field(default=1, ge=0)
    f_mask: int = Field(default=1, ge=0)
    f_abs: int = Field(default=1, ge=0)
    f_sig: int = Field(default=1, ge=0)
    f_swish: int = Field(default=1, ge=0)

    @classmethod
    def zero(cls) -> "FlopFactors":
        return cls(f_exp=0, f_max=0, f_mask=0, f_abs=0, f_sig=0, f_swish=0)


class CostReport(BaseModel):
    """Analytic cost of one configuration"""
    config_id: str
    seq_len: int
    chunk_size: int
    cell_flops: int
    forward_flops: int
    backward_flops: int
    train_step_flops: int
    param_count: int
    state_bytes: int
    kv_equiv_tokens: int
    state_mb: float
    state_mib: float


class BenchResult(BaseModel):
    """One benchmark row (median over repeats)"""
    scenario: str
    config_id: str
    model_kind: Literal["mlstm", "attention"]
    prefill_len: int = 0
    gen_len: int = 0
    batch: int = 1
    prefill_time_s: float = 0.0
    wall_time_s: float = 0.0
    tokens_per_sec: float = 0.0
    per_token_s: float = 0.0
    peak_state_bytes: int = 0
    measured_state_bytes: int = 0
    rss_delta_bytes: int = 0
    repeats: int = 0
    status: Literal["ok", "oom", "error"] = "ok"
    error: Optional[str] = None
    tokens_sha: Optional[str] = None


class TrainStepRecord(BaseModel):
    """Raw per-step training measurements"""
    step: int
    loss: float
    ppl: float
    lr: float
    grad_norm: float
    batch_size: int
    tokens_seen: int


class SessionCreateRequest(BaseModel):
    """Request model for opening a generation session"""
    text: Optional[str] = None
    tokens: Optional[List[int]] = None


class GenerateRequest(BaseModel):
    """Request model for continuing a session"""
    n_tokens: int = Field(default=32, ge=0)
    temperature: Optional[float] = Field(default=None, gt=0)
    seed: int = 0


class SessionInfo(BaseModel):
    """Session information model"""
    session_id: str
    created_at: str
    position: int
    prompt_tokens: int
    generated_tokens: int
    state_bytes: int
    prefill_time_ms: float


class GenerateResponse(BaseModel):
    """Response model for generated continuations with performance metrics"""
    session_id: str
    tokens: List[int]
    text: Optional[str] = None
    position: int
    decode_time_ms: float
    tokens_per_sec: float
    state_bytes: int
