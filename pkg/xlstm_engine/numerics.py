"""
Numerics Module
Soft-capping, RMSNorm, LayerNorm and the SwiGLU MLP as autograd Functions
with analytic backward passes, plus the module wrappers used by the model.
"""
import logging
from typing import Callable, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from xlstm_engine.config import config
from xlstm_engine.errors import ConfigurationError, NonFiniteError, ShapeMismatchError
from xlstm_engine.models import Precision

logger = logging.getLogger(__name__)


def check_finite(tensor: torch.Tensor, name: str) -> torch.Tensor:
    """Raise NonFiniteError for NaN/Inf entries when checked mode is on."""
    if config.CHECKED_MODE and not bool(torch.isfinite(tensor).all()):
        raise NonFiniteError(f"non-finite values in {name}")
    return tensor


def finite_or_zero(m: torch.Tensor) -> torch.Tensor:
    """Stabilizer reference: non-finite max states read as 0."""
    return torch.where(torch.isfinite(m), m, torch.zeros_like(m))


def make_tensor(data, precision: Precision = Precision.FLOAT32) -> torch.Tensor:
    tensor = torch.as_tensor(data, dtype=Precision(precision).dtype)
    return check_finite(tensor, "tensor")


def _check_last_dim(x: torch.Tensor, param: Optional[torch.Tensor], name: str):
    if param is not None and param.shape[-1] != x.shape[-1]:
        raise ShapeMismatchError(
            f"{name} has length {param.shape[-1]}, normalized axis has {x.shape[-1]}"
        )


def _sum_to_param(grad: torch.Tensor, param: torch.Tensor) -> torch.Tensor:
    return grad.reshape(-1, param.shape[-1]).sum(0).reshape(param.shape)


class SoftCapFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, cap):
        t = torch.tanh(x / cap)
        ctx.save_for_backward(t)
        out = cap * t
        # saturated tanh rounds to exactly +-1; keep the result inside the open interval
        bound = torch.nextafter(
            torch.tensor(cap, dtype=x.dtype, device=x.device),
            torch.tensor(0.0, dtype=x.dtype, device=x.device),
        )
        return torch.maximum(torch.minimum(out, bound), -bound)

    @staticmethod
    def backward(ctx, grad_out):
        (t,) = ctx.saved_tensors
        return grad_out * (1 - t * t), None


class RMSNormFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight, eps):
        rstd = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps)
        y = x * rstd
        ctx.save_for_backward(y, rstd, weight)
        return y if weight is None else y * weight

    @staticmethod
    def backward(ctx, grad_out):
        y, rstd, weight = ctx.saved_tensors
        grad_w = None
        if weight is not None:
            grad_w = _sum_to_param(grad_out * y, weight)
            grad_y = grad_out * weight
        else:
            grad_y = grad_out
        grad_x = rstd * (grad_y - y * (grad_y * y).mean(-1, keepdim=True))
        return grad_x, grad_w, None


class LayerNormFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight, bias, eps):
        centered = x - x.mean(-1, keepdim=True)
        rstd = torch.rsqrt(centered.pow(2).mean(-1, keepdim=True) + eps)
        xhat = centered * rstd
        ctx.save_for_backward(xhat, rstd, weight)
        ctx.has_bias = bias is not None
        out = xhat if weight is None else xhat * weight
        return out if bias is None else out + bias

    @staticmethod
    def backward(ctx, grad_out):
        xhat, rstd, weight = ctx.saved_tensors
        grad_w = grad_b = None
        if weight is not None:
            grad_w = _sum_to_param(grad_out * xhat, weight)
            grad_xhat = grad_out * weight
        else:
            grad_xhat = grad_out
        if ctx.has_bias:
            grad_b = grad_out.reshape(-1, grad_out.shape[-1]).sum(0)
        grad_x = rstd * (
            grad_xhat
            - grad_xhat.mean(-1, keepdim=True)
            - xhat * (grad_xhat * xhat).mean(-1, keepdim=True)
        )
        return grad_x, grad_w, grad_b, None


class SwiGLUFunction(torch.autograd.Function):
    """w_down (swish(w_gate x) * w_up x) with weights in (out, in) layout."""

    @staticmethod
    def forward(ctx, x, w_gate, w_up, w_down):
        a = x @ w_gate.t()
        b = x @ w_up.t()
        hidden = F.silu(a) * b
        ctx.save_for_backward(x, a, b, w_gate, w_up, w_down)
        return hidden @ w_down.t()

    @staticmethod
    def backward(ctx, grad_out):
        x, a, b, w_gate, w_up, w_down = ctx.saved_tensors
        s = torch.sigmoid(a)
        swish = a * s
        hidden = swish * b

        grad_hidden = grad_out @ w_down
        grad_a = grad_hidden * b * (s + a * s * (1 - s))
        grad_b = grad_hidden * swish
        grad_x = grad_a @ w_gate + grad_b @ w_up

        flat_x = x.reshape(-1, x.shape[-1])
        grad_w_down = grad_out.reshape(-1, grad_out.shape[-1]).t() @ hidden.reshape(-1, hidden.shape[-1])
        grad_w_gate = grad_a.reshape(-1, grad_a.shape[-1]).t() @ flat_x
        grad_w_up = grad_b.reshape(-1, grad_b.shape[-1]).t() @ flat_x
        return grad_x, grad_w_gate, grad_w_up, grad_w_down


def softcap(x: torch.Tensor, cap: float) -> torch.Tensor:
    """cap * tanh(x / cap), strictly inside (-cap, cap)."""
    if cap <= 0:
        raise ConfigurationError(f"softcap requires a positive cap, got {cap}")
    return SoftCapFunction.apply(x, float(cap))


def rmsnorm(x: torch.Tensor, weight: Optional[torch.Tensor] = None, eps: float = 1e-6) -> torch.Tensor:
    _check_last_dim(x, weight, "rmsnorm scale")
    return RMSNormFunction.apply(x, weight, eps)


def layernorm(
    x: torch.Tensor,
    weight: Optional[torch.Tensor] = None,
    bias: Optional[torch.Tensor] = None,
    eps: float = 1e-6,
) -> torch.Tensor:
    _check_last_dim(x, weight, "layernorm scale")
    _check_last_dim(x, bias, "layernorm shift")
    return LayerNormFunction.apply(x, weight, bias, eps)


def swiglu_mlp(x, w_gate, w_up, w_down) -> torch.Tensor:
    if w_gate.shape != w_up.shape or w_gate.shape[1] != x.shape[-1] or w_down.shape != w_gate.shape[::-1]:
        raise ShapeMismatchError(
            f"swiglu weights {tuple(w_gate.shape)}, {tuple(w_up.shape)}, {tuple(w_down.shape)} "
            f"do not fit input width {x.shape[-1]}"
        )
    return SwiGLUFunction.apply(x, w_gate, w_up, w_down)


def backward(
    op: Callable[..., torch.Tensor],
    inputs: Sequence[Optional[torch.Tensor]],
    upstream: torch.Tensor,
    **kwargs,
) -> Tuple[Optional[torch.Tensor], ...]:
    """
    Vector-Jacobian product of `op` at `inputs`: the gradients of
    <op(*inputs), upstream> w.r.t. every tensor input (None for None inputs).
    """
    leaves = [None if t is None else t.detach().clone().requires_grad_(True) for t in inputs]
    with torch.enable_grad():
        out = op(*leaves, **kwargs)
        wanted = [t for t in leaves if t is not None]
        grads = iter(torch.autograd.grad(out, wanted, upstream, allow_unused=True))
    return tuple(None if t is None else next(grads) for t in leaves)


class RMSNorm(nn.Module):
    """RMSNorm with a learnable scale and no shift"""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rmsnorm(x, self.weight, self.eps)


class LayerNorm(nn.Module):
    """LayerNorm with a learnable scale; shift only when `bias=True`"""

    def __init__(self, dim: int, eps: float = 1e-6, bias: bool = False):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim)) if bias else None

    def forward(self, x):
        return layernorm(x, self.weight, self.bias, self.eps)


def build_norm(kind: str, dim: int, eps: float) -> nn.Module:
    if kind == "rmsnorm":
        return RMSNorm(dim, eps)
    if kind == "layernorm":
        return LayerNorm(dim, eps)
    raise ConfigurationError(f"unknown norm type '{kind}'")


class SwiGLU(nn.Module):
    """Gated feed-forward: down(swish(gate(x)) * up(x))"""

    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.gate = nn.Linear(d_model, d_ff, bias=False)
        self.up = nn.Linear(d_model, d_ff, bias=False)
        self.down = nn.Linear(d_ff, d_model, bias=False)

    def forward(self, x):
        return swiglu_mlp(x, self.gate.weight, self.up.weight, self.down.weight)
