import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def report_line(request):
    """Write a line through pytest's terminal reporter so it shows up even
    with output capture on (used by the acceptance suite for its one-line
    verdicts)."""
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(msg: str) -> None:
        if tr is not None:
            tr.write_line(msg)
        else:
            print(msg)

    return emit
