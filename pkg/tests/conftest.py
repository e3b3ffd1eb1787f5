import numpy as np
import pytest
import torch

from motionlab.net import UNet, UNetConfig


def tiny_config(**kw):
    base = dict(base_channels=16, channel_mult=(1, 2), heads=2, frames=4, height=8, width=8, timesteps=20)
    base.update(kw)
    return UNetConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return UNet(tiny_config()).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
