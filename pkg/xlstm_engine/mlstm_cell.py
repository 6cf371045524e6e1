"""
mLSTM Cell Module
Exact stabilized recurrent update of the matrix-memory LSTM, one token at a
time, and the sequential reference mode over whole sequences.

Tensors may carry leading batch/head axes; the single-head case has none.
Vectors: q, k (..., d_qk), v (..., d_hv); gates: (...).
"""
import math
from typing import List, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from xlstm_engine.errors import ShapeMismatchError
from xlstm_engine.numerics import check_finite, finite_or_zero


class CellState(NamedTuple):
    """Matrix memory C (..., d_qk, d_hv), normalizer n (..., d_qk), max state m (...)"""
    C: torch.Tensor
    n: torch.Tensor
    m: torch.Tensor

    @classmethod
    def zeros(
        cls,
        d_qk: int,
        d_hv: int,
        batch_shape: Sequence[int] = (),
        dtype: torch.dtype = torch.float32,
        device=None,
    ) -> "CellState":
        shape = tuple(batch_shape)
        return cls(
            C=torch.zeros(*shape, d_qk, d_hv, dtype=dtype, device=device),
            n=torch.zeros(*shape, d_qk, dtype=dtype, device=device),
            m=torch.zeros(shape, dtype=dtype, device=device),
        )

    @property
    def d_qk(self) -> int:
        return self.C.shape[-2]

    @property
    def d_hv(self) -> int:
        return self.C.shape[-1]

    @property
    def nbytes(self) -> int:
        return sum(t.numel() * t.element_size() for t in self)

    def detach(self) -> "CellState":
        return CellState(*(t.detach() for t in self))


class StepInput(NamedTuple):
    """Per-token cell inputs; gate pre-activations are already soft-capped"""
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    i_pre: torch.Tensor
    f_pre: torch.Tensor


def stack_steps(steps: List[StepInput]) -> StepInput:
    """Stack per-token inputs into the time-axis layout of recurrent_forward."""
    return StepInput(
        q=torch.stack([s.q for s in steps], dim=-2),
        k=torch.stack([s.k for s in steps], dim=-2),
        v=torch.stack([s.v for s in steps], dim=-2),
        i_pre=torch.stack([s.i_pre for s in steps], dim=-1),
        f_pre=torch.stack([s.f_pre for s in steps], dim=-1),
    )


def _check_step(s: StepInput, state: CellState):
    if s.q.shape[-1] != state.d_qk or s.k.shape[-1] != state.d_qk:
        raise ShapeMismatchError(
            f"q/k width {s.q.shape[-1]}/{s.k.shape[-1]} does not match state d_qk {state.d_qk}"
        )
    if s.v.shape[-1] != state.d_hv:
        raise ShapeMismatchError(f"v width {s.v.shape[-1]} does not match state d_hv {state.d_hv}")


def cell_step(s: StepInput, state: CellState) -> Tuple[torch.Tensor, CellState]:
    """One stabilized mLSTM update; returns (h_tilde, new_state)."""
    _check_step(s, state)
    log_f = F.logsigmoid(s.f_pre)
    m = torch.maximum(log_f + state.m, s.i_pre)
    # m = -inf only when nothing was written and the memory was reset
    m_ref = finite_or_zero(m)
    f_act = torch.exp(log_f + state.m - m_ref)
    i_act = torch.exp(s.i_pre - m_ref)

    C = f_act[..., None, None] * state.C + i_act[..., None, None] * (s.k[..., :, None] * s.v[..., None, :])
    n = f_act[..., None] * state.n + i_act[..., None] * s.k

    q = s.q / math.sqrt(state.d_qk)
    numerator = (C * q[..., :, None]).sum(-2)
    denominator = torch.maximum((n * q).sum(-1).abs(), torch.exp(-m))
    h = numerator / denominator[..., None]

    new_state = CellState(C, n, m)
    for name, tensor in zip(("C", "n", "m", "h"), (C, n, m, h)):
        check_finite(tensor, f"cell_step {name}")
    return h, new_state


def reset_state(state: CellState) -> CellState:
    return CellState(torch.zeros_like(state.C), torch.zeros_like(state.n), torch.zeros_like(state.m))


def recurrent_forward(
    seq: StepInput, state: Optional[CellState] = None
) -> Tuple[torch.Tensor, CellState]:
    """
    Fold cell_step over the time axis.

    seq holds q, k (..., T, d_qk), v (..., T, d_hv) and gates (..., T).
    Returns H_tilde (..., T, d_hv) and the final state.
    """
    if state is None:
        state = CellState.zeros(
            seq.q.shape[-1], seq.v.shape[-1], seq.i_pre.shape[:-1], dtype=seq.q.dtype, device=seq.q.device
        )
    T = seq.i_pre.shape[-1]
    if T == 0:
        return seq.v.new_zeros(*seq.v.shape[:-2], 0, seq.v.shape[-1]), state

    outputs = []
    for t in range(T):
        step = StepInput(
            q=seq.q[..., t, :],
            k=seq.k[..., t, :],
            v=seq.v[..., t, :],
            i_pre=seq.i_pre[..., t],
            f_pre=seq.f_pre[..., t],
        )
        h, state = cell_step(step, state)
        outputs.append(h)
    return torch.stack(outputs, dim=-2), state
