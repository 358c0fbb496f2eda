import numpy as np
import pytest

from rangefuse.tensor import set_debug

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True, scope="session")
def _debug_mode():
    set_debug(True)
    yield
    set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_report():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_points(rng, n, spread=20.0):
    """N x 4 float32 points scattered around the origin."""
    xyz = rng.normal(0.0, spread, (n, 3))
    return np.column_stack([xyz, rng.random(n)]).astype(np.float32)


@pytest.fixture
def make_points():
    return random_points


def randomize_affine(module, rng):
    """Move norm affines and biases off their init values (zero biases put
    the SE ReLU exactly on its kink: with batch size 1 the pooled BN output
    equals beta)."""
    for name, p in module.named_parameters():
        if name.endswith(("beta", "bias")):
            p.data[:] = rng.uniform(0.2, 0.6, p.shape)
        elif name.endswith("gamma"):
            p.data[:] = rng.uniform(0.5, 1.5, p.shape)
