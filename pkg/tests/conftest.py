import numpy as np
import pytest

from clvs.engine import TokenLayout
from clvs.harness.synth import gen_model, random_prompt

TINY = {"n_layers": 6, "n_heads": 2, "head_dim": 8, "vocab": 32}


@pytest.fixture
def tiny_model():
    return gen_model(11, TINY)


@pytest.fixture
def layout():
    return TokenLayout(2, 4, 3)


@pytest.fixture
def prompt(layout):
    return random_prompt(11, layout.prompt_len, 32)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
