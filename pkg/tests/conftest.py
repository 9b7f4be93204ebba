import numpy as np
import pytest

from app.services.condensation import SchurHandle
from app.services.coupling_core import CouplingProblem, InterfaceSpace, PatchLayout, build_beam_problem


@pytest.fixture
def scalar_problem():
    """
    1-DOF toy: coarse K=[[2]] with no interior and no load, fine K=[[1]] loaded by 1.
    S^G = 2, S^R = 1, b^G = 0, b^R = 1, fixed point p* = 2, u_R = 1.
    """
    coarse = SchurHandle.from_matrices([[2.0]], [0.0], interface=[0], name="coarse")
    fine = SchurHandle.from_matrices([[1.0]], [1.0], interface=[0], name="fine")
    space = InterfaceSpace.from_maps(1, assembly=[[[1.0]]], interpolators=[[[1.0]]], has_complementary=False)
    return CouplingProblem([coarse], [fine], [0], space, name="scalar")


@pytest.fixture(scope="session")
def column_problem():
    """Two stacked cubes clamped at the bottom, both carrying a fine patch."""
    layout = PatchLayout(grid=(1, 1, 2))
    return build_beam_problem(layout, coarse_elems=1, fine_elems=4, name="column")


@pytest.fixture(scope="session")
def partial_column_problem():
    """Two stacked cubes, only the bottom one refined; the top one is the complementary zone."""
    layout = PatchLayout(grid=(1, 1, 2), patches=((0, 0, 0),))
    return build_beam_problem(layout, coarse_elems=1, fine_elems=4, name="partial")


@pytest.fixture(scope="session")
def beam_problem():
    """2x2x2 beam at test resolution; each fine patch holds an 8-element inclusion."""
    layout = PatchLayout(grid=(2, 2, 2))
    return build_beam_problem(layout, coarse_elems=1, fine_elems=4, name="beam222")


@pytest.fixture(scope="session")
def full_beam_problem():
    """2x2x2 beam at benchmark resolution: coarse 4, fine 8 elements per cube edge."""
    layout = PatchLayout(grid=(2, 2, 2))
    return build_beam_problem(layout, coarse_elems=4, fine_elems=8, E_ratio=10.0, nu=0.3, name="beam222-full")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_spd(rng):
    def make(n: int) -> np.ndarray:
        A = rng.standard_normal((n, n))
        return A @ A.T + n * np.eye(n)
    return make
