"""
Chunkwise-parallel mLSTM.

The sequence is split into chunks of `chunk_size` tokens. Memory states are
materialized only at chunk boundaries (a short sequential recurrence over
chunks); within a chunk the contribution of the chunk's own tokens is a
causally masked, gate-decayed attention-style product. Both parts are
combined with a shared max state so the result equals recurrent_forward.

Log-space quantities per chunk, with lf = logsigmoid(f_pre):
    cum[t]        = sum_{r<=t} lf[r]
    decay[t, s]   = sum_{s<r<=t} lf[r] + i_pre[s]    (s <= t, else -inf)
    m[t]          = max(cum[t] + m_enter, max_s decay[t, s])
"""
import math
from typing import NamedTuple, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from einops import rearrange, repeat

from xlstm_engine.errors import ConfigurationError, ShapeMismatchError
from xlstm_engine.mlstm_cell import CellState, StepInput, recurrent_forward
from xlstm_engine.models import ChunkConfig
from xlstm_engine.numerics import check_finite, finite_or_zero


class ChunkwiseSaved(NamedTuple):
    """Inputs kept for the backward pass (recomputed there)"""
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    i_pre: torch.Tensor
    f_pre: torch.Tensor
    state: CellState
    chunk_size: int


class ChunkwiseGrads(NamedTuple):
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    i_pre: torch.Tensor
    f_pre: torch.Tensor
    state: CellState


class InterChunkStates(NamedTuple):
    """States entering each chunk (chunk axis at -3/-2/-1) and the final state"""
    C: torch.Tensor
    n: torch.Tensor
    m: torch.Tensor
    final: CellState


def _chunk_len(chunk_size: Union[int, ChunkConfig]) -> int:
    size = chunk_size.chunk_size if isinstance(chunk_size, ChunkConfig) else int(chunk_size)
    if size < 1:
        raise ConfigurationError(f"chunk_size must be >= 1, got {size}")
    return size


def _check_inputs(q, k, v, i_pre, f_pre, state: CellState):
    lead = q.shape[:-1]
    if k.shape != q.shape:
        raise ShapeMismatchError(f"k shape {tuple(k.shape)} differs from q shape {tuple(q.shape)}")
    if v.shape[:-1] != lead or i_pre.shape != lead or f_pre.shape != lead:
        raise ShapeMismatchError(
            f"v {tuple(v.shape)}, i_pre {tuple(i_pre.shape)} and f_pre {tuple(f_pre.shape)} "
            f"do not align with q {tuple(q.shape)}"
        )
    if state.C.shape[-2:] != (q.shape[-1], v.shape[-1]):
        raise ShapeMismatchError(
            f"state memory {tuple(state.C.shape[-2:])} does not match ({q.shape[-1]}, {v.shape[-1]})"
        )


def segment_log_decay(log_f: torch.Tensor) -> torch.Tensor:
    """(..., L) -> (..., L, L) with out[t, s] = sum_{s<r<=t} log_f[r], -inf above the diagonal."""
    L = log_f.shape[-1]
    expanded = repeat(log_f, "... r -> ... r s", s=L)
    strict = torch.tril(torch.ones(L, L, dtype=torch.bool, device=log_f.device), diagonal=-1)
    expanded = expanded.masked_fill(~strict, 0.0)
    sums = expanded.cumsum(dim=-2)
    causal = torch.tril(torch.ones(L, L, dtype=torch.bool, device=log_f.device))
    return sums.masked_fill(~causal, float("-inf"))


def inter_chunk_states(k, v, log_decay, log_f_cum, state: CellState) -> InterChunkStates:
    """
    Per-chunk memory contributions, then the sequential recurrence over chunk
    boundaries. k, v: (..., N, L, d); log_decay: (..., N, L, L); log_f_cum: (..., N, L).
    """
    m_end = log_decay[..., -1, :].amax(-1)
    weights = torch.exp(log_decay[..., -1, :] - finite_or_zero(m_end)[..., None])
    weighted_k = k * weights[..., None]
    kv_chunk = weighted_k.transpose(-1, -2) @ v
    n_chunk = weighted_k.sum(-2)
    f_total = log_f_cum[..., -1]

    C, n, m = state
    entering_C, entering_n, entering_m = [], [], []
    for j in range(k.shape[-3]):
        entering_C.append(C)
        entering_n.append(n)
        entering_m.append(m)
        m_new = torch.maximum(f_total[..., j] + m, m_end[..., j])
        m_ref = finite_or_zero(m_new)
        carry = torch.exp(f_total[..., j] + m - m_ref)
        write = torch.exp(m_end[..., j] - m_ref)
        C = carry[..., None, None] * C + write[..., None, None] * kv_chunk[..., j, :, :]
        n = carry[..., None] * n + write[..., None] * n_chunk[..., j, :]
        m = m_new

    return InterChunkStates(
        C=torch.stack(entering_C, dim=-3),
        n=torch.stack(entering_n, dim=-2),
        m=torch.stack(entering_m, dim=-1),
        final=CellState(C, n, m),
    )


def inter_chunk_readout(q_scaled, states: InterChunkStates) -> Tuple[torch.Tensor, torch.Tensor]:
    """Query the state entering each chunk: numerator (..., N, L, d_hv), denominator (..., N, L)."""
    numerator = q_scaled @ states.C
    denominator = (q_scaled @ states.n[..., None]).squeeze(-1)
    return numerator, denominator


def intra_chunk_attention(q_scaled, k, v, decay) -> Tuple[torch.Tensor, torch.Tensor]:
    """Gate-decayed causal attention inside each chunk."""
    scores = (q_scaled @ k.transpose(-1, -2)) * decay
    return scores @ v, scores.sum(-1)


def _chunkwise(q, k, v, i_pre, f_pre, state: CellState, L: int) -> Tuple[torch.Tensor, CellState]:
    T, d_qk = q.shape[-2], q.shape[-1]
    pad = (-T) % L
    if pad:
        # padded rows write nothing (i = -inf) and keep the memory (log f = 0)
        q = F.pad(q, (0, 0, 0, pad))
        k = F.pad(k, (0, 0, 0, pad))
        v = F.pad(v, (0, 0, 0, pad))
        i_pre = F.pad(i_pre, (0, pad), value=float("-inf"))
        f_pre = F.pad(f_pre, (0, pad), value=float("inf"))

    qc, kc, vc = (rearrange(t, "... (n l) d -> ... n l d", l=L) for t in (q, k, v))
    ic = rearrange(i_pre, "... (n l) -> ... n l", l=L)
    log_f = F.logsigmoid(rearrange(f_pre, "... (n l) -> ... n l", l=L))

    log_f_cum = log_f.cumsum(-1)
    log_decay = segment_log_decay(log_f) + ic[..., None, :]
    m_intra = log_decay.amax(-1)

    states = inter_chunk_states(kc, vc, log_decay, log_f_cum, state)

    m_inter = log_f_cum + states.m[..., None]
    m_comb = finite_or_zero(torch.maximum(m_inter, m_intra))
    inter_scale = torch.exp(m_inter - m_comb)
    decay = torch.exp(log_decay - m_comb[..., None])

    q_scaled = qc / math.sqrt(d_qk)
    num_inter, den_inter = inter_chunk_readout(q_scaled, states)
    num_intra, den_intra = intra_chunk_attention(q_scaled, kc, vc, decay)

    numerator = num_inter * inter_scale[..., None] + num_intra
    denominator = torch.maximum((den_inter * inter_scale + den_intra).abs(), torch.exp(-m_comb))
    H = rearrange(numerator / denominator[..., None], "... n l d -> ... (n l) d")
    return H[..., :T, :], states.final


def chunkwise_forward(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    i_pre: torch.Tensor,
    f_pre: torch.Tensor,
    state: Optional[CellState] = None,
    chunk_size: Union[int, ChunkConfig] = 64,
    return_saved: bool = False,
):
    """
    Chunkwise-parallel mLSTM over q, k (..., T, d_qk), v (..., T, d_hv),
    gates (..., T). Returns (H_tilde, final_state[, ChunkwiseSaved]).
    """
    L = _chunk_len(chunk_size)
    if state is None:
        state = CellState.zeros(q.shape[-1], v.shape[-1], i_pre.shape[:-1], dtype=q.dtype, device=q.device)
    _check_inputs(q, k, v, i_pre, f_pre, state)

    if q.shape[-2] == 0:
        H, final = v.new_zeros(v.shape), state
    elif L == 1:
        H, final = recurrent_forward(StepInput(q, k, v, i_pre, f_pre), state)
    else:
        H, final = _chunkwise(q, k, v, i_pre, f_pre, state, L)
        check_finite(H, "chunkwise output")

    if return_saved:
        return H, final, ChunkwiseSaved(q, k, v, i_pre, f_pre, state, L)
    return H, final


def chunk_boundary_states(q, k, v, i_pre, f_pre, state=None, chunk_size=64) -> CellState:
    """States after each full chunk (positions L, 2L, ...), chunk axis at -3/-2/-1."""
    L = _chunk_len(chunk_size)
    if state is None:
        state = CellState.zeros(q.shape[-1], v.shape[-1], i_pre.shape[:-1], dtype=q.dtype, device=q.device)
    _check_inputs(q, k, v, i_pre, f_pre, state)
    T = q.shape[-2] - q.shape[-2] % L
    if T == 0:
        return CellState(state.C[..., :0, :, :], state.n[..., :0, :], state.m[..., :0])

    kc, vc = (rearrange(t[..., :T, :], "... (n l) d -> ... n l d", l=L) for t in (k, v))
    ic = rearrange(i_pre[..., :T], "... (n l) -> ... n l", l=L)
    log_f = F.logsigmoid(rearrange(f_pre[..., :T], "... (n l) -> ... n l", l=L))
    log_decay = segment_log_decay(log_f) + ic[..., None, :]
    states = inter_chunk_states(kc, vc, log_decay, log_f.cumsum(-1), state)

    final = states.final
    return CellState(
        C=torch.cat([states.C[..., 1:, :, :], final.C[..., None, :, :]], dim=-3),
        n=torch.cat([states.n[..., 1:, :], final.n[..., None, :]], dim=-2),
        m=torch.cat([states.m[..., 1:], final.m[..., None]], dim=-1),
    )


def chunkwise_backward(
    saved: ChunkwiseSaved, dH: torch.Tensor, d_final: Optional[CellState] = None
) -> ChunkwiseGrads:
    """Gradients of <H, dH> (+ <final, d_final>) w.r.t. every input and the initial state."""
    leaves = [
        t.detach().requires_grad_(True)
        for t in (saved.q, saved.k, saved.v, saved.i_pre, saved.f_pre, *saved.state)
    ]
    with torch.enable_grad():
        H, final = chunkwise_forward(*leaves[:5], CellState(*leaves[5:]), saved.chunk_size)
        outputs, upstream = [H], [dH]
        if d_final is not None:
            for tensor, grad in zip(final, d_final):
                if grad is not None:
                    outputs.append(tensor)
                    upstream.append(grad)
        grads = torch.autograd.grad(outputs, leaves, upstream, allow_unused=True)

    grads = [torch.zeros_like(leaf) if g is None else g for leaf, g in zip(leaves, grads)]
    return ChunkwiseGrads(*grads[:5], state=CellState(*grads[5:]))
