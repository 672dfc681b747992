import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vap.model import ModelConfig, init_weights  # noqa: E402
from vap.synth import SynthConfig, generate  # noqa: E402


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(feature_dim=9, hidden_dim=16, n_heads=2, n_self_layers=1, n_cross_layers=2,
                       max_context_frames=200, seed=1)


@pytest.fixture(scope="session")
def tiny_weights(tiny_cfg):
    w = init_weights(tiny_cfg)
    rng = np.random.default_rng(7)
    # non-trivial biases and gains so no path is accidentally degenerate
    for k in w:
        if k.endswith((".b", ".g", "bq", "bk", "bv", "bo", "b1", "b2")):
            w[k] = (w[k] + 0.1 * rng.standard_normal(w[k].shape)).astype(np.float32)
    return w


@pytest.fixture(scope="session")
def short_dialogue():
    return generate(SynthConfig(seed=3, n_dialogues=1, duration_s=6.0))[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
