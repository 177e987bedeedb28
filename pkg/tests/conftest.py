import numpy as np
import pytest

from otop import mscnn
from otop.raster import Raster


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_params(config, seed, dtype=np.float32):
    """Inference params with non-trivial BN statistics and biases."""
    p = mscnn.init_params(config, seed, dtype=dtype)
    r = np.random.default_rng(seed + 1000)
    t = p.tensors
    for name, _, cout in config.layer_names():
        t[f"{name}.bias"] = r.normal(0, 0.1, cout).astype(dtype)
        t[f"{name}.gamma"] = r.uniform(0.5, 1.5, cout).astype(dtype)
        t[f"{name}.beta"] = r.normal(0, 0.2, cout).astype(dtype)
        t[f"{name}.mean"] = r.normal(0, 0.2, cout).astype(dtype)
        t[f"{name}.var"] = r.uniform(0.5, 2.0, cout).astype(dtype)
    t["fusion.bias"] = r.normal(0, 0.1, 2).astype(dtype)
    return p


def random_image(rng, h=32, w=32, bands=6):
    return Raster(rng.uniform(0, 1, (bands, h, w)).astype(np.float32))


ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    """Record one acceptance line; printed in the terminal summary."""
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
