import numpy as np
import pytest

from ditmoe.config import ModelConfig, get_preset
from ditmoe.moe import MoeConfig


def small_config(**kw) -> ModelConfig:
    """D=8, L=2, 4 experts, K=2, one shared expert, 4x4 single-channel input."""
    base = dict(depth=2, width=8, heads=2, patch=2, input_size=4, in_channels=1,
                moe=MoeConfig(n=4, K=2, n_s=1), placement="every:1", learned_sigma=True, num_classes=3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    return get_preset("tiny")


@pytest.fixture
def small():
    return small_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
