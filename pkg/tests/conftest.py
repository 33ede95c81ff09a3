import pytest

from malconv.model import ModelConfig


@pytest.fixture
def tiny_config():
    # small enough for full finite-difference sweeps
    return ModelConfig(embed_dim=3, filters=4, window=4, stride=4, fc_hidden=5, max_len=32)


def pytest_terminal_summary(terminalreporter):
    from _report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
