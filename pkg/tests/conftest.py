import sys

import numpy as np
import pytest
import torch

from unidiff.model import MMDiT, ModelConfig, perturb_parameters


def tiny_config(**kw) -> ModelConfig:
    base = dict(size_tag="custom", n_layers=2, d_model=32, n_heads=4, id_hidden=32, time_dim=32)
    base.update(kw)
    return ModelConfig(**base)


def param_oracle(n_layers, d, vocab=44, l_max=24, c_in=25, c_lat=12, p=2, n_f=4, hidden=256, time_dim=256,
                 mlp=4, tokens=256, crop=16):
    lin = lambda i, o: i * o + o  # noqa: E731
    # layer norms carry no affine weights; adaLN supplies shift/scale
    stream = lin(d, 3 * d) + lin(d, d) + lin(d, mlp * d) + lin(mlp * d, d) + lin(d, 6 * d)
    return (vocab * d + l_max * d
            + lin(crop * crop * 3, hidden) + lin(hidden, n_f * d)
            + lin(time_dim, d) + lin(d, d)
            + lin(p * p * c_in, d) + tokens * d
            + n_layers * 2 * stream
            + lin(d, 2 * d) + lin(d, p * p * c_lat))


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return MMDiT(tiny_config())


@pytest.fixture
def perturbed_model():
    torch.manual_seed(0)
    model = MMDiT(tiny_config())
    perturb_parameters(model, 0.05, seed=1)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
