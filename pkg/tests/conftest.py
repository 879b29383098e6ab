import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def rand64(*shape, seed=0, scale=1.0, requires_grad=False):
    g = torch.Generator().manual_seed(seed)
    t = torch.randn(*shape, generator=g, dtype=torch.float64) * scale
    return t.requires_grad_(requires_grad)


def as_float64(module):
    """Promote a module's parameters to float64 leaves for gradient checks."""
    module.double()
    return dict(module.named_parameters())


def np_rng(seed=0):
    return np.random.default_rng(seed)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: the multi-minute synthetic transfer experiment")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for num in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[num])
