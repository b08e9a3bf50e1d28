import sys

import numpy as np
import pytest

from lacl.model import ModelDims, ModelParams, PARAM_NAMES


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_unit(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def jittered_params(dims: ModelDims, rng, scale: float = 0.3) -> ModelParams:
    """Random network with non-zero biases so every code path is exercised."""
    p = ModelParams.init(dims, rng)
    for n in PARAM_NAMES:
        p.tensors[n] = p.tensors[n] + scale * rng.standard_normal(p[n].shape)
    return p


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criteria lines, which are otherwise captured."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
