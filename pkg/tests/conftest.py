import numpy as np
import pytest
import torch
from hypothesis import settings

torch.set_num_threads(1)

# property tests stay quick; the heavy lifting lives in test_acceptance.py
settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model_config():
    """Smallest legal transformer config: 16x16 inputs, 4-wide stem."""
    from ugformer import ModelConfig
    return ModelConfig(base_channels=4, num_heads=2, node_budget=64)


def random_mask(rng, h, w, p=0.3):
    return (rng.random((h, w)) < p).astype(np.uint8)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    import acceptance_report
    report_lines = acceptance_report.lines()
    if not report_lines:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria", sep="=")
    for line in report_lines:
        terminalreporter.write_line(line)
