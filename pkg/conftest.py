"""Shared fixtures: tiny float64 configs, randomized models and random cell inputs."""
import pytest
import torch

from xlstm_engine.config import config
from xlstm_engine.mlstm_cell import StepInput
from xlstm_engine.model import build_model
from xlstm_engine.models import ModelConfig


def randomize_parameters(model: torch.nn.Module, seed: int = 0, scale: float = 0.5) -> torch.nn.Module:
    """Uniform(-scale, scale) for every parameter, so gates and norms are non-trivial."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in model.parameters():
            noise = torch.rand(param.shape, generator=generator, dtype=torch.float64)
            param.copy_(((noise * 2 - 1) * scale).to(param.dtype))
    return model


def random_cell_inputs(batch_shape=(2, 3), T=16, d_qk=4, d_hv=6, seed=0, dtype=torch.float64) -> StepInput:
    generator = torch.Generator().manual_seed(seed)

    def randn(*shape):
        return torch.randn(*shape, generator=generator, dtype=dtype)

    return StepInput(
        q=randn(*batch_shape, T, d_qk),
        k=randn(*batch_shape, T, d_qk),
        v=randn(*batch_shape, T, d_hv),
        i_pre=randn(*batch_shape, T) * 2,
        f_pre=randn(*batch_shape, T) * 2 + 2,
    )


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return ModelConfig(vocab_size=17, num_blocks=2, d_model=16, num_heads=2, chunk_size=4, precision="float64")


@pytest.fixture
def eod_cfg() -> ModelConfig:
    return ModelConfig(
        vocab_size=11, num_blocks=2, d_model=16, num_heads=2, chunk_size=4, eod_token_id=10, precision="float64"
    )


@pytest.fixture
def make_model():
    """build_model + randomized parameters"""
    def factory(cfg: ModelConfig, seed: int = 0, scale: float = 0.5):
        torch.manual_seed(seed)
        return randomize_parameters(build_model(cfg), seed, scale).eval()

    return factory


@pytest.fixture
def cell_inputs():
    return random_cell_inputs


@pytest.fixture
def checked_mode(monkeypatch):
    monkeypatch.setattr(config, "CHECKED_MODE", True)
    yield
