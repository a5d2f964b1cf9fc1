import sys

import numpy as np
import pytest

from attribution_attacks import model as M
from attribution_attacks.dataset import synth_blobs


@pytest.fixture(scope="session")
def blobs():
    return synth_blobs(120, 3, 4, 0.15, seed=5)


@pytest.fixture(scope="session")
def lr_model(blobs):
    arch = M.Architecture("lr", 4, 3, l2_reg=0.01)
    return M.train(blobs, arch, M.TrainConfig(epochs=60, lr=0.1, optimizer="adam"))


@pytest.fixture(scope="session")
def mlp_model(blobs):
    arch = M.Architecture("mlp", 4, 3, hidden=(6, 5), l2_reg=0.01)
    return M.train(blobs, arch, M.TrainConfig(epochs=40, lr=0.02, optimizer="adam", batch_size=16))


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split(":")[0].split()[1][1:])):
            terminalreporter.write_line(line)
