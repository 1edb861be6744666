import numpy as np
import pytest

from mwtomo.model import ImagingSetup, add_noise, build_grid, build_operators, forward_solve, make_phantom


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


class Instance:
    """Small random problem: operators, noisy data and a random point (x, W)."""

    def __init__(self, grid_side=10, m=6, seed=0):
        self.setup = ImagingSetup(grid_side=grid_side, num_emitters=m, num_receivers=m + 1)
        self.grid = build_grid(self.setup)
        self.ops = build_operators(self.setup, self.grid)
        self.truth = make_phantom("small-square", self.grid)
        self.W_true, clean = forward_solve(self.truth, self.ops)
        self.clean = clean
        self.data = add_noise(clean, 20.0, seed)
        self.rng = np.random.default_rng(seed)

    def random_point(self, scale=0.5):
        n, M = self.grid.n, self.setup.num_emitters
        x = scale * crandn(self.rng, n)
        W = scale * 0.1 * crandn(self.rng, M, n)
        return x, W


@pytest.fixture(scope="session")
def inst():
    return Instance()


@pytest.fixture(scope="session")
def inst20():
    return Instance(grid_side=20, m=20, seed=1)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
