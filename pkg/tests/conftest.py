import numpy as np
import pytest
import torch

from rawvid.raw import BayerFrame


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def random_frame(rng, shape=(8, 8), pattern="RGGB", bit_depth=16, normalized=False):
    if normalized:
        return BayerFrame(rng.uniform(0, 1, shape), pattern, bit_depth, normalized=True)
    return BayerFrame(rng.integers(0, 2 ** bit_depth, shape), pattern, bit_depth)


def pytest_configure(config):
    config.acceptance_results = {}


@pytest.fixture
def acceptance(request):
    """Record one acceptance criterion's verdict for the end-of-run summary."""
    results = request.config.acceptance_results

    def record(number, title, passed, detail):
        results[number] = (title, bool(passed), detail)
        print(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "acceptance_results", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
