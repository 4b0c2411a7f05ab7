import numpy as np
import pytest

from memhomog import cell_elastic as ce
from memhomog import cell_stokes as cs
from memhomog import geometry as geo

DISC = {"dim": 2, "shape": "disc", "radius": 0.3}
BALL = {"dim": 3, "shape": "ball", "radius": 0.3}
BOX = {"dim": 3, "shape": "box", "lo": [0.25, 0.25, -0.25], "hi": [0.75, 0.75, 0.25]}
BOX2 = {"dim": 2, "shape": "box", "lo": [0.25, -0.25], "hi": [0.75, 0.25]}
CROSS = {"dim": 3, "shape": "cross"}


def cell(desc, n):
    return geo.build_cell_geometry(dict(desc, resolution=n))


class Fluid:
    def __init__(self, desc, n):
        self.geom = cell(desc, n)
        self.sols = cs.solve_all(self.geom)
        self.coeffs = cs.assemble_fluid_coefficients(self.sols)


@pytest.fixture(scope="session")
def disc16():
    return Fluid(DISC, 16)


@pytest.fixture(scope="session")
def disc32():
    return Fluid(DISC, 32)


@pytest.fixture(scope="session")
def ball8():
    return Fluid(BALL, 8)


@pytest.fixture(scope="session")
def iso3():
    return ce.MicroElasticTensor.isotropic(3, 1.0, 1.0)


@pytest.fixture(scope="session")
def cross8(iso3):
    """Elastic correctors (all pairs plus bending) on the 3D cross cell."""
    geom = cell(CROSS, 8)
    sols = ce.solve_elastic_cells(geom, iso3, bending=True)
    return sols, ce.effective_tensors(sols)


@pytest.fixture(scope="session")
def elas2d(cross8):
    return cross8[1].reduce_to_2d()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance lines

_ACCEPTANCE = []


@pytest.fixture
def accept():
    """Record one summary line per acceptance criterion."""

    def record(crit, passed, detail):
        _ACCEPTANCE.append(f"criterion {crit:<4} {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
