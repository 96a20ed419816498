import numpy as np
import pytest

from tomoconvex.basis import build_basis, default_quadrature
from tomoconvex.core import Grid
from tomoconvex.forward import make_source_line, synthesize_boundary_data
from tomoconvex.operator import make_context
from tomoconvex.pipeline import prepare_bundle
from tomoconvex.presets import make_preset_medium


@pytest.fixture(scope="session")
def desk_grid():
    return Grid(B=8, Mz=33, A=1.0, sigma=0.5)


@pytest.fixture(scope="session")
def desk_basis():
    return build_basis(3, 1.0, default_quadrature(3))


@pytest.fixture(scope="session")
def bump_medium(desk_grid):
    return make_preset_medium("bump", desk_grid.A, desk_grid.sigma)


@pytest.fixture(scope="session")
def bump_data(desk_grid, bump_medium):
    """Boundary data + fine medium for the clean bump desk problem."""
    data, m_fine = synthesize_boundary_data(bump_medium, desk_grid,
                                            make_source_line(15), refine=4)
    return data, m_fine


@pytest.fixture(scope="session")
def bump_bundle(desk_grid, desk_basis, bump_data):
    return prepare_bundle(bump_data[0], desk_basis, desk_grid)


@pytest.fixture(scope="session")
def bump_ctx(bump_bundle, desk_basis):
    return make_context(bump_bundle, desk_basis)


@pytest.fixture(scope="session")
def bump_m_true(desk_grid, bump_medium):
    return bump_medium.sample(desk_grid.xs, desk_grid.ys, desk_grid.z_nodes)
