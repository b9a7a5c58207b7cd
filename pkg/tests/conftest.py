import numpy as np
import pytest
import torch

from pixelfuse.autodiff import set_deterministic
from pixelfuse.model import ModelConfig, build_model

set_deterministic()


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=16, n_layers=2, n_heads=2, ffn_mult=2, max_seq_len=40, dtype="f64")
    base.update(kw)
    return ModelConfig(**base)


def randomize(model, seed=0, scale=0.3):
    """Non-degenerate weights everywhere, including the zero-initialised flow head."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


@pytest.fixture
def tiny_model():
    return randomize(build_model(tiny_config(), seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from _acceptance import lines
    rows = lines()
    if rows:
        terminalreporter.section("acceptance criteria")
        for row in rows:
            terminalreporter.write_line(row)
