import math

import pytest
import torch
import torch.nn.functional as F
from torch.autograd import gradcheck

from conftest import random_cell_inputs
from xlstm_engine.errors import NonFiniteError, ShapeMismatchError
from xlstm_engine.mlstm_cell import (
    CellState,
    StepInput,
    cell_step,
    recurrent_forward,
    reset_state,
    stack_steps,
)


def _step(seq: StepInput, t: int) -> StepInput:
    return StepInput(seq.q[..., t, :], seq.k[..., t, :], seq.v[..., t, :], seq.i_pre[..., t], seq.f_pre[..., t])


def unstabilized_forward(seq: StepInput):
    """Plain exponential gating without the max state (only safe for moderate gates)."""
    d_qk, d_hv = seq.q.shape[-1], seq.v.shape[-1]
    C = torch.zeros(*seq.i_pre.shape[:-1], d_qk, d_hv, dtype=seq.q.dtype)
    n = torch.zeros(*seq.i_pre.shape[:-1], d_qk, dtype=seq.q.dtype)
    outputs = []
    for t in range(seq.i_pre.shape[-1]):
        s = _step(seq, t)
        f = torch.sigmoid(s.f_pre)
        i = torch.exp(s.i_pre)
        C = f[..., None, None] * C + i[..., None, None] * (s.k[..., :, None] * s.v[..., None, :])
        n = f[..., None] * n + i[..., None] * s.k
        q = s.q / math.sqrt(d_qk)
        numerator = (C * q[..., :, None]).sum(-2)
        denominator = torch.clamp((n * q).sum(-1).abs(), min=1.0)
        outputs.append(numerator / denominator[..., None])
    return torch.stack(outputs, -2), C, n


def test_single_step_example():
    state = CellState.zeros(1, 1, dtype=torch.float64)
    one = torch.ones(1, dtype=torch.float64)
    zero = torch.tensor(0.0, dtype=torch.float64)
    h, new = cell_step(StepInput(one, one, one, zero, zero), state)
    # m = max(log(1/2), 0) = 0, so i = 1, f = 1/2 and C = n = 1
    assert new.m == 0.0
    assert torch.allclose(new.C, torch.ones(1, 1, dtype=torch.float64))
    assert torch.allclose(new.n, one)
    assert torch.allclose(h, one)


def _scalar(value: float) -> torch.Tensor:
    return torch.tensor(value, dtype=torch.float64)


def _vec(*values: float) -> torch.Tensor:
    return torch.tensor(values, dtype=torch.float64)


def test_closed_forget_gate_step_example():
    h, new = cell_step(StepInput(_vec(1.0), _vec(1.0), _vec(2.0), _scalar(0.0), _scalar(-1e9)), CellState.zeros(1, 1, dtype=torch.float64))
    # m = max(-1e9 + 0, 0) = 0, f = exp(-1e9) = 0, i = 1
    assert new.m.item() == 0.0
    assert new.C.item() == 2.0
    assert new.n.item() == 1.0
    assert h.item() == 2.0


def test_two_step_retention_example():
    steps = [
        StepInput(_vec(1.0), _vec(1.0), _vec(2.0), _scalar(0.0), _scalar(0.0)),
        StepInput(_vec(0.5), _vec(5.0), _vec(7.0), _scalar(-1e9), _scalar(1e9)),
    ]
    H, final = recurrent_forward(stack_steps(steps), CellState.zeros(1, 1, dtype=torch.float64))
    # step 1 writes C = 2, n = 1 at m = 0; step 2 only reads: 2 * 0.5 / max(|1 * 0.5|, exp(0)) = 1
    assert H[:, 0].tolist() == [2.0, 1.0]
    assert (final.C.item(), final.n.item(), final.m.item()) == (2.0, 1.0, 0.0)


def test_pure_retention_keeps_the_state():
    g = torch.Generator().manual_seed(3)
    state = CellState(
        torch.randn(3, 4, generator=g, dtype=torch.float64),
        torch.randn(3, generator=g, dtype=torch.float64),
        _scalar(-0.75),
    )
    step = StepInput(
        torch.randn(3, generator=g, dtype=torch.float64),
        torch.randn(3, generator=g, dtype=torch.float64),
        torch.randn(4, generator=g, dtype=torch.float64),
        _scalar(-1e9),
        _scalar(1e9),
    )
    _, new = cell_step(step, state)
    assert (new.C - state.C).abs().max() < 1e-12
    assert (new.n - state.n).abs().max() < 1e-12
    assert new.m.item() == state.m.item() + F.logsigmoid(_scalar(1e9)).item()


def test_fresh_state_with_zero_gates_keeps_max_state_at_zero():
    _, new = cell_step(StepInput(_vec(1.0, 2.0), _vec(0.5, -1.0), _vec(3.0), _scalar(0.0), _scalar(0.0)), CellState.zeros(2, 1, dtype=torch.float64))
    assert new.m.item() == 0.0


def test_aligned_query_reads_back_value():
    state = CellState.zeros(2, 3, dtype=torch.float64)
    q = k = torch.tensor([2.0, 0.0], dtype=torch.float64)
    v = torch.tensor([0.5, -1.0, 3.0], dtype=torch.float64)
    h, _ = cell_step(StepInput(q, k, v, torch.tensor(0.0, dtype=torch.float64), torch.tensor(5.0, dtype=torch.float64)), state)
    assert torch.allclose(h, v)


def test_stabilized_matches_unstabilized(cell_inputs):
    seq = cell_inputs(batch_shape=(2,), T=24, d_qk=3, d_hv=5, seed=1)
    H, state = recurrent_forward(seq)
    H_ref, C_ref, n_ref = unstabilized_forward(seq)
    assert torch.allclose(H, H_ref, atol=1e-10)
    scale = torch.exp(state.m)
    assert torch.allclose(state.C * scale[..., None, None], C_ref, atol=1e-9)
    assert torch.allclose(state.n * scale[..., None], n_ref, atol=1e-9)


def test_huge_input_gate_stays_finite(checked_mode):
    seq = random_cell_inputs(batch_shape=(), T=6, d_qk=2, d_hv=2, seed=2)
    seq = seq._replace(i_pre=torch.full((6,), 1000.0, dtype=torch.float64))
    H, state = recurrent_forward(seq)
    assert torch.isfinite(H).all()
    assert torch.isfinite(state.C).all() and torch.isfinite(state.n).all()


def test_sequence_splitting(cell_inputs):
    seq = cell_inputs(T=20, seed=3)
    H_full, final_full = recurrent_forward(seq)

    first = StepInput(seq.q[..., :9, :], seq.k[..., :9, :], seq.v[..., :9, :], seq.i_pre[..., :9], seq.f_pre[..., :9])
    rest = StepInput(seq.q[..., 9:, :], seq.k[..., 9:, :], seq.v[..., 9:, :], seq.i_pre[..., 9:], seq.f_pre[..., 9:])
    H_a, mid = recurrent_forward(first)
    H_b, final_split = recurrent_forward(rest, mid)

    assert torch.equal(torch.cat([H_a, H_b], -2), H_full)
    for a, b in zip(final_split, final_full):
        assert torch.equal(a, b)


def test_empty_sequence_keeps_state(cell_inputs):
    seq = cell_inputs(T=0)
    state = CellState(torch.ones(2, 3, 4, 6, dtype=torch.float64), torch.ones(2, 3, 4, dtype=torch.float64), torch.ones(2, 3, dtype=torch.float64))
    H, out = recurrent_forward(seq, state)
    assert H.shape == (2, 3, 0, 6)
    assert out is state


def test_forget_reset_matches_fresh_state(cell_inputs):
    seq = cell_inputs(batch_shape=(), T=12, seed=4)
    f_pre = seq.f_pre.clone()
    f_pre[6] = float("-inf")
    H_reset, _ = recurrent_forward(seq._replace(f_pre=f_pre))

    tail = StepInput(seq.q[6:], seq.k[6:], seq.v[6:], seq.i_pre[6:], seq.f_pre[6:])
    H_fresh, _ = recurrent_forward(tail)
    assert torch.allclose(H_reset[6:], H_fresh, atol=1e-12)


def test_batched_heads_match_single_head_runs(cell_inputs):
    seq = cell_inputs(batch_shape=(2, 3), T=10, seed=5)
    H, _ = recurrent_forward(seq)
    for b in range(2):
        for h in range(3):
            single = StepInput(seq.q[b, h], seq.k[b, h], seq.v[b, h], seq.i_pre[b, h], seq.f_pre[b, h])
            H_single, _ = recurrent_forward(single)
            assert torch.allclose(H[b, h], H_single, atol=1e-14)


def test_stack_steps_round_trip(cell_inputs):
    seq = cell_inputs(batch_shape=(2,), T=5, seed=6)
    stacked = stack_steps([_step(seq, t) for t in range(5)])
    for a, b in zip(stacked, seq):
        assert torch.equal(a, b)


def test_width_mismatch_raises():
    state = CellState.zeros(4, 6)
    bad = StepInput(torch.zeros(3), torch.zeros(3), torch.zeros(6), torch.tensor(0.0), torch.tensor(0.0))
    with pytest.raises(ShapeMismatchError):
        cell_step(bad, state)
    bad_v = StepInput(torch.zeros(4), torch.zeros(4), torch.zeros(5), torch.tensor(0.0), torch.tensor(0.0))
    with pytest.raises(ShapeMismatchError):
        cell_step(bad_v, state)


def test_nan_input_raises_in_checked_mode(checked_mode):
    state = CellState.zeros(2, 2)
    nan = StepInput(torch.tensor([float("nan"), 0.0]), torch.ones(2), torch.ones(2), torch.tensor(0.0), torch.tensor(0.0))
    with pytest.raises(NonFiniteError):
        cell_step(nan, state)


def test_state_helpers():
    state = CellState.zeros(4, 8, (2, 3))
    assert (state.d_qk, state.d_hv) == (4, 8)
    assert state.nbytes == 2 * 3 * (4 * 8 + 4 + 1) * 4
    filled = CellState(state.C + 1, state.n + 1, state.m + 1)
    cleared = reset_state(filled)
    assert all(torch.equal(t, torch.zeros_like(t)) for t in cleared)


def test_recurrent_gradcheck(cell_inputs):
    seq = cell_inputs(batch_shape=(2,), T=5, d_qk=2, d_hv=3, seed=7)
    inputs = tuple(t.clone().requires_grad_(True) for t in seq)

    def run(*tensors):
        return recurrent_forward(StepInput(*tensors))[0]

    assert gradcheck(run, inputs, eps=1e-5, atol=1e-7, rtol=1e-4)


def test_recurrent_gradcheck_through_initial_state(cell_inputs):
    seq = cell_inputs(batch_shape=(), T=4, d_qk=2, d_hv=2, seed=8)
    g = torch.Generator().manual_seed(9)
    C0 = torch.randn(2, 2, generator=g, dtype=torch.float64).requires_grad_(True)
    n0 = torch.randn(2, generator=g, dtype=torch.float64).requires_grad_(True)
    m0 = torch.tensor(0.3, dtype=torch.float64)

    def run(C, n):
        H, final = recurrent_forward(seq, CellState(C, n, m0))
        return H, final.C, final.n

    assert gradcheck(run, (C0, n0), eps=1e-5, atol=1e-7, rtol=1e-4)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
