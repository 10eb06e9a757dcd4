import numpy as np
import pytest

from cuspbranch.modespace import CuspGrid, DofMap, uniform_grid

BETA = 1.5
ALPHA_BAR = 1.25
Y_MAX = 3.0


@pytest.fixture(scope="session")
def grid() -> CuspGrid:
    """Fine uniform grid with beta and alpha_bar as nodes."""
    return uniform_grid(BETA, Y_MAX, 300, ALPHA_BAR)


@pytest.fixture(scope="session")
def coarse_grid() -> CuspGrid:
    return uniform_grid(BETA, Y_MAX, 60, ALPHA_BAR)


@pytest.fixture(scope="session")
def dofmap(grid: CuspGrid) -> DofMap:
    return DofMap(grid, 2)


@pytest.fixture(scope="session")
def coarse_dofmap(coarse_grid: CuspGrid) -> DofMap:
    return DofMap(coarse_grid, 2)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)
