"""
Model Module
Multi-head mLSTM layer, post-up-projection block, the decoder stack with
capped logits, prefill + recurrent generation, and the causal-attention
comparator with a KV cache.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
from einops import rearrange

from xlstm_engine.chunkwise import chunkwise_forward
from xlstm_engine.errors import ConfigurationError, ShapeMismatchError, TokenRangeError
from xlstm_engine.mlstm_cell import CellState, StepInput, recurrent_forward
from xlstm_engine.models import ModelConfig
from xlstm_engine.numerics import SwiGLU, build_norm, check_finite, layernorm, rmsnorm, softcap

logger = logging.getLogger(__name__)

MODES = ("chunkwise", "recurrent")


@dataclass
class ModelState:
    """Recurrent state of the whole stack: one CellState per block with a head axis"""
    cells: List[CellState]
    position: int = 0
    eod_pending: Optional[torch.Tensor] = None

    @classmethod
    def zeros(cls, cfg: ModelConfig, batch: int = 1, device=None) -> "ModelState":
        return cls(
            cells=[
                CellState.zeros(cfg.d_qk, cfg.d_hv, (batch, cfg.num_heads), dtype=cfg.dtype, device=device)
                for _ in range(cfg.num_blocks)
            ]
        )

    def cell(self, block: int, head: int, batch_index: int = 0) -> CellState:
        state = self.cells[block]
        return CellState(state.C[batch_index, head], state.n[batch_index, head], state.m[batch_index, head])

    @property
    def nbytes(self) -> int:
        return sum(cell.nbytes for cell in self.cells)

    def detach(self) -> "ModelState":
        return ModelState([c.detach() for c in self.cells], self.position, self.eod_pending)


@dataclass
class AttentionState:
    """KV cache of the comparator: (keys, values) per block, each (B, H, T, d)"""
    layers: List[Tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)
    position: int = 0

    @property
    def nbytes(self) -> int:
        return sum(k.numel() * k.element_size() + v.numel() * v.element_size() for k, v in self.layers)


class MultiHeadNorm(nn.Module):
    """Per-head normalization over d_hv with one learnable scale of width d_model"""

    def __init__(self, num_heads: int, head_dim: int, kind: str = "layernorm", eps: float = 1e-6):
        super().__init__()
        if kind not in ("layernorm", "rmsnorm"):
            raise ConfigurationError(f"unknown norm type '{kind}'")
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.kind = kind
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_heads * head_dim))

    def forward(self, h):
        # h: (B, H, T, d_hv)
        if self.kind == "layernorm":
            normed = layernorm(h, None, None, self.eps)
        else:
            normed = rmsnorm(h, None, self.eps)
        return normed * self.weight.view(self.num_heads, 1, self.head_dim)


class mLSTMLayer(nn.Module):
    """Multi-head mLSTM: dense q/k/v, per-head scalar gates, output gate, headwise norm, projection"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D, NH = cfg.d_model, cfg.num_heads
        self.q = nn.Linear(D, NH * cfg.d_qk, bias=cfg.use_bias)
        self.k = nn.Linear(D, NH * cfg.d_qk, bias=cfg.use_bias)
        self.v = nn.Linear(D, NH * cfg.d_hv, bias=cfg.use_bias)
        self.igate = nn.Linear(D, NH)
        self.fgate = nn.Linear(D, NH)
        self.ogate = nn.Linear(D, D, bias=cfg.use_bias)
        self.head_norm = MultiHeadNorm(NH, cfg.d_hv, cfg.headnorm_type, cfg.norm_eps)
        self.proj = nn.Linear(D, D, bias=False)

    def gate_preactivations(self, x, reset_mask=None) -> Tuple[torch.Tensor, torch.Tensor]:
        i_pre = rearrange(self.igate(x), "b t h -> b h t")
        f_pre = rearrange(self.fgate(x), "b t h -> b h t")
        if self.cfg.gate_softcap:
            i_pre = softcap(i_pre, self.cfg.gate_cap)
            f_pre = softcap(f_pre, self.cfg.gate_cap)
        if reset_mask is not None:
            # the reset sentinel bypasses the cap: sigmoid(-inf) = 0 zeroes the memory
            f_pre = f_pre.masked_fill(reset_mask[:, None, :], float("-inf"))
        return i_pre, f_pre

    def _check_state(self, state: Optional[CellState], batch: int):
        if state is None:
            return
        expected = (batch, self.cfg.num_heads, self.cfg.d_qk, self.cfg.d_hv)
        if tuple(state.C.shape) != expected:
            raise ShapeMismatchError(f"layer state {tuple(state.C.shape)} does not match {expected}")

    def forward(self, x, state: Optional[CellState] = None, mode: str = "chunkwise", reset_mask=None):
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode '{mode}', expected one of {MODES}")
        self._check_state(state, x.shape[0])
        NH = self.cfg.num_heads
        q = rearrange(self.q(x), "b t (h d) -> b h t d", h=NH)
        k = rearrange(self.k(x), "b t (h d) -> b h t d", h=NH)
        v = rearrange(self.v(x), "b t (h d) -> b h t d", h=NH)
        i_pre, f_pre = self.gate_preactivations(x, reset_mask)

        if mode == "chunkwise":
            h, new_state = chunkwise_forward(q, k, v, i_pre, f_pre, state, self.cfg.chunk_size)
        else:
            h, new_state = recurrent_forward(StepInput(q, k, v, i_pre, f_pre), state)

        h = rearrange(self.head_norm(h), "b h t d -> b t (h d)")
        return self.proj(torch.sigmoid(self.ogate(x)) * h), new_state


class xLSTMBlock(nn.Module):
    """z = x + mLSTM(Norm(x)); y = z + MLP(Norm(z))"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mlstm_norm = build_norm(cfg.prenorm_type, cfg.d_model, cfg.norm_eps)
        self.mlstm = mLSTMLayer(cfg)
        self.ffn_norm = build_norm(cfg.prenorm_type, cfg.d_model, cfg.norm_eps)
        self.ffn = SwiGLU(cfg.d_model, cfg.d_ff)

    def forward(self, x, state: Optional[CellState] = None, mode: str = "chunkwise", reset_mask=None):
        h, new_state = self.mlstm(self.mlstm_norm(x), state, mode, reset_mask)
        z = x + h
        return z + self.ffn(self.ffn_norm(z)), new_state


def _as_batch(tokens) -> Tuple[torch.Tensor, bool]:
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.dim() == 1:
        return tokens[None, :], True
    if tokens.dim() != 2:
        raise ShapeMismatchError(f"tokens must be (T,) or (B, T), got {tuple(tokens.shape)}")
    return tokens, False


def _check_tokens(tokens: torch.Tensor, vocab_size: int):
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= vocab_size):
        raise TokenRangeError(
            f"token ids must lie in [0, {vocab_size}), got range "
            f"[{int(tokens.min())}, {int(tokens.max())}]"
        )


class xLSTMLanguageModel(nn.Module):
    """embed -> blocks -> final norm -> logits head -> softcap"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList([xLSTMBlock(cfg) for _ in range(cfg.num_blocks)])
        self.out_norm = build_norm(cfg.prenorm_type, cfg.d_model, cfg.norm_eps)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        init_weights(self, cfg)

    def init_state(self, batch: int = 1) -> ModelState:
        return ModelState.zeros(self.cfg, batch, device=self.embedding.weight.device)

    def reset_mask_for(self, tokens: torch.Tensor, state: Optional[ModelState]) -> Optional[torch.Tensor]:
        """True at positions that follow an EOD token (their forget gate is forced to zero)."""
        if self.cfg.eod_token_id is None:
            return None
        is_eod = tokens == self.cfg.eod_token_id
        mask = torch.zeros_like(is_eod)
        mask[:, 1:] = is_eod[:, :-1]
        if state is not None and state.eod_pending is not None and tokens.shape[1]:
            mask[:, 0] = state.eod_pending
        return mask

    def forward(self, tokens, state: Optional[ModelState] = None, mode: str = "chunkwise", reset_mask=None):
        tokens, squeeze = _as_batch(tokens)
        _check_tokens(tokens, self.cfg.vocab_size)
        if reset_mask is None:
            reset_mask = self.reset_mask_for(tokens, state)
        logits, new_state = self.forward_embeddings(self.embedding(tokens), state, mode, reset_mask)
        if self.cfg.eod_token_id is not None and tokens.shape[1]:
            new_state.eod_pending = tokens[:, -1] == self.cfg.eod_token_id
        elif state is not None:
            new_state.eod_pending = state.eod_pending
        return (logits[0] if squeeze else logits), new_state

    def forward_embeddings(self, x, state: Optional[ModelState] = None, mode: str = "chunkwise", reset_mask=None):
        """Run the stack on already-embedded inputs x (B, T, d_model)."""
        if state is None:
            state = ModelState.zeros(self.cfg, x.shape[0], device=x.device)
        if len(state.cells) != self.cfg.num_blocks:
            raise ShapeMismatchError(
                f"state has {len(state.cells)} block states, model has {self.cfg.num_blocks} blocks"
            )
        cells = []
        for block, cell in zip(self.blocks, state.cells):
            x, cell = block(x, cell, mode, reset_mask)
            cells.append(cell)
        logits = self.lm_head(self.out_norm(x))
        if self.cfg.logit_softcap:
            logits = softcap(logits, self.cfg.logit_cap)
        check_finite(logits, "logits")
        return logits, ModelState(cells, state.position + x.shape[1])


def init_weights(model: nn.Module, cfg: ModelConfig):
    """Fan-in uniform linears, zero biases; gate weights zero with fixed bias init."""
    for module in model.modules():
        if isinstance(module, nn.Linear):
            bound = 1.0 / math.sqrt(module.in_features)
            nn.init.uniform_(module.weight, -bound, bound)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            bound = 1.0 / math.sqrt(module.embedding_dim)
            nn.init.uniform_(module.weight, -bound, bound)

    for module in model.modules():
        if isinstance(module, mLSTMLayer):
            with torch.no_grad():
                module.igate.weight.zero_()
                module.igate.bias.fill_(cfg.igate_bias_init)
                module.fgate.weight.zero_()
                module.fgate.bias.copy_(
                    torch.linspace(cfg.fgate_bias_min, cfg.fgate_bias_max, cfg.num_heads)
                )
            if not cfg.igate_trainable:
                module.igate.requires_grad_(False)


def build_model(cfg: ModelConfig) -> xLSTMLanguageModel:
    model = xLSTMLanguageModel(cfg).to(cfg.dtype)
    logger.info(
        f"✅ Built xLSTM model {cfg.config_id} "
        f"({sum(p.numel() for p in model.parameters()):,} parameters, {cfg.precision.value})"
    )
    return model


class CausalSelfAttention(nn.Module):
    """Naive multi-head causal softmax attention with an optional KV cache"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D, NH = cfg.d_model, cfg.num_heads
        self.q = nn.Linear(D, NH * cfg.d_qk, bias=False)
        self.k = nn.Linear(D, NH * cfg.d_qk, bias=False)
        self.v = nn.Linear(D, NH * cfg.d_hv, bias=False)
        self.out = nn.Linear(NH * cfg.d_hv, D, bias=False)

    def forward(self, x, cache: Optional[Tuple[torch.Tensor, torch.Tensor]] = None):
        NH = self.cfg.num_heads
        T = x.shape[1]
        q = rearrange(self.q(x), "b t (h d) -> b h t d", h=NH)
        k = rearrange(self.k(x), "b t (h d) -> b h t d", h=NH)
        v = rearrange(self.v(x), "b t (h d) -> b h t d", h=NH)
        if cache is not None:
            k = torch.cat([cache[0], k], dim=2)
            v = torch.cat([cache[1], v], dim=2)
        past = k.shape[2] - T

        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.cfg.d_qk)
        causal = torch.ones(T, past + T, dtype=torch.bool, device=x.device).tril(diagonal=past)
        attn = torch.softmax(scores.masked_fill(~causal, float("-inf")), dim=-1)
        y = rearrange(attn @ v, "b h t d -> b t (h d)")
        return self.out(y), (k, v)


class AttentionBlock(nn.Module):
    """Pre-norm residual block with attention in place of the mLSTM layer"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = build_norm(cfg.prenorm_type, cfg.d_model, cfg.norm_eps)
        self.attn = CausalSelfAttention(cfg)
        self.ffn_norm = build_norm(cfg.prenorm_type, cfg.d_model, cfg.norm_eps)
        self.ffn = SwiGLU(cfg.d_model, cfg.d_ff)

    def forward(self, x, cache=None):
        h, cache = self.attn(self.attn_norm(x), cache)
        z = x + h
        return z + self.ffn(self.ffn_norm(z)), cache


class TransformerLanguageModel(nn.Module):
    """Attention comparator with the same embedding, block shape and head as the xLSTM model"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList([AttentionBlock(cfg) for _ in range(cfg.num_blocks)])
        self.out_norm = build_norm(cfg.prenorm_type, cfg.d_model, cfg.norm_eps)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        init_weights(self, cfg)

    def init_state(self, batch: int = 1) -> AttentionState:
        return AttentionState()

    def forward(self, tokens, state: Optional[AttentionState] = None, mode: str = "chunkwise", reset_mask=None):
        tokens, squeeze = _as_batch(tokens)
        _check_tokens(tokens, self.cfg.vocab_size)
        x = self.embedding(tokens)
        past = state.layers if state is not None and state.layers else [None] * len(self.blocks)
        layers = []
        for block, cache in zip(self.blocks, past):
            x, cache = block(x, cache)
            layers.append(cache)
        logits = self.lm_head(self.out_norm(x))
        position = (state.position if state is not None else 0) + tokens.shape[1]
        return (logits[0] if squeeze else logits), AttentionState(layers, position)


def build_comparator(cfg: ModelConfig) -> TransformerLanguageModel:
    return TransformerLanguageModel(cfg).to(cfg.dtype)


@dataclass
class GenerationResult:
    """Generated tokens (B, n), the logits each token was chosen from (B, n, V), the final state"""
    tokens: torch.Tensor
    logits: torch.Tensor
    state: Union[ModelState, AttentionState]
    next_logits: Optional[torch.Tensor] = None

    @property
    def token_list(self) -> List[int]:
        return self.tokens[0].tolist()


def select_tokens(logits: torch.Tensor, temperature: Optional[float] = None, generator=None) -> torch.Tensor:
    """Greedy (ties -> lowest id) or temperature sampling from a seeded generator; temperature <= 0 is greedy."""
    if temperature is None or temperature <= 0:
        return logits.argmax(dim=-1)
    probs = torch.softmax(logits / temperature, dim=-1)
    return torch.multinomial(probs, 1, generator=generator).squeeze(-1)


@torch.no_grad()
def decode(
    model: nn.Module,
    state,
    next_logits: torch.Tensor,
    n_tokens: int,
    temperature: Optional[float] = None,
    generator: Optional[torch.Generator] = None,
) -> GenerationResult:
    """Token-by-token recurrent continuation from `state`; every emitted token is fed back."""
    if n_tokens < 0:
        raise ConfigurationError(f"n_tokens must be >= 0, got {n_tokens}")
    tokens, chosen_from = [], []
    for _ in range(n_tokens):
        chosen_from.append(next_logits)
        token = select_tokens(next_logits, temperature, generator)
        tokens.append(token)
        logits, state = model(token[:, None], state, mode="recurrent")
        next_logits = logits[:, -1]

    batch = next_logits.shape[0]
    if tokens:
        return GenerationResult(torch.stack(tokens, 1), torch.stack(chosen_from, 1), state, next_logits)
    empty = torch.zeros(batch, 0, dtype=torch.long)
    return GenerationResult(empty, next_logits.new_zeros(batch, 0, next_logits.shape[-1]), state, next_logits)


@torch.no_grad()
def generate(
    model: nn.Module,
    prompt: Union[Sequence[int], torch.Tensor],
    n_tokens: int,
    temperature: Optional[float] = None,
    seed: int = 0,
    state=None,
) -> GenerationResult:
    """Prefill the prompt in chunkwise mode, then decode `n_tokens` recurrently."""
    prompt, _ = _as_batch(prompt)
    if n_tokens < 0:
        raise ConfigurationError(f"n_tokens must be >= 0, got {n_tokens}")
    if prompt.shape[1] == 0:
        if n_tokens > 0:
            raise ConfigurationError("generation needs at least one prompt token to start from")
        state = state if state is not None else model.init_state(prompt.shape[0])
        empty = torch.zeros(prompt.shape[0], 0, dtype=torch.long)
        return GenerationResult(empty, torch.zeros(prompt.shape[0], 0, model.cfg.vocab_size), state)

    logits, state = model(prompt, state, mode="chunkwise")
    generator = torch.Generator().manual_seed(seed)
    return decode(model, state, logits[:, -1], n_tokens, temperature, generator)
