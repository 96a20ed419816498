import numpy as np
import pytest

from tomoconvex.core import (BoundaryData, CoeffField, Grid, ScalarField3D, dx_central,
                             dy_central, h1_inner, norm_H1h, norm_L2h, zero_boundary)
from tomoconvex.fileio import (load_boundary_data, load_coeff_field, load_scalar_field,
                               save_boundary_data, save_coeff_field, save_scalar_field)


def make_field(grid, fn, N=1, boundary_zero=False):
    X, Y, Z = np.meshgrid(grid.xs, grid.ys, grid.z_nodes, indexing="ij")
    vals = np.stack([fn(X, Y, Z) for _ in range(N)])
    if boundary_zero:
        vals = zero_boundary(vals, grid)
    return CoeffField(vals, grid, boundary_zero=boundary_zero)


@pytest.fixture
def grid():
    return Grid(B=8, Mz=17, A=1.0, sigma=0.5)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(B=1, Mz=17, A=1.0, sigma=0.5)
    with pytest.raises(ValueError):
        Grid(B=8, Mz=2, A=1.0, sigma=0.5)
    with pytest.raises(ValueError):
        Grid(B=100, Mz=17, A=1.0, sigma=0.5, h0=0.02)  # h below h0


def test_grid_axes(grid):
    assert grid.h == 0.125
    assert grid.z_nodes[0] == grid.A and grid.z_nodes[-1] == grid.A + grid.sigma
    assert abs(grid.z_weights.sum() - grid.sigma) < 1e-14


def test_dx_exact_on_affine_and_quadratic(grid):
    lin = make_field(grid, lambda x, y, z: x)
    d = dx_central(lin)
    assert np.abs(d.values - 1.0).max() < 1e-12
    const = make_field(grid, lambda x, y, z: 0.0 * x + 3.0)
    assert np.abs(dx_central(const).values).max() < 1e-12
    quad = make_field(grid, lambda x, y, z: x * x)
    dq = dx_central(quad)
    X = np.meshgrid(grid.xs, grid.ys, grid.z_nodes, indexing="ij")[0]
    # second-order stencils (central and one-sided) are exact on quadratics
    assert np.abs(dq.values[0] - 2.0 * X).max() < 1e-12


def test_dy_mirror(grid):
    f = make_field(grid, lambda x, y, z: y * y - 2 * y)
    Y = np.meshgrid(grid.xs, grid.ys, grid.z_nodes, indexing="ij")[1]
    assert np.abs(dy_central(f).values[0] - (2 * Y - 2)).max() < 1e-12


def test_dx_dy_commute(grid):
    rng = np.random.default_rng(0)
    f = CoeffField(rng.standard_normal((2, 9, 9, 17)), grid)
    a = dy_central(dx_central(f)).values
    b = dx_central(dy_central(f)).values
    assert np.abs(a - b).max() < 1e-12


def test_max_norm_bound(grid):
    rng = np.random.default_rng(1)
    f = CoeffField(rng.standard_normal((1, 9, 9, 17)), grid)
    d = dx_central(f).values
    vmax = np.abs(f.values).max()
    # central stencil bound at interior nodes
    assert np.abs(d[:, 1:-1]).max() <= 2.0 * vmax / grid.h + 1e-12
    # one-sided stencils are bounded by 4/h
    assert np.abs(d).max() <= 4.0 * vmax / grid.h + 1e-12


def test_norm_L2h_worked_example():
    grid = Grid(B=4, Mz=9, A=1.0, sigma=1.0)
    f = make_field(grid, lambda x, y, z: np.ones_like(x))
    # h^2 (B-1)^2 sigma = (1/16) * 9 * 1 = 0.5625 -> norm 0.75
    assert abs(norm_L2h(f) - 0.75) < 1e-12


def test_norm_L2h_homogeneous(grid):
    rng = np.random.default_rng(2)
    f = CoeffField(rng.standard_normal((2, 9, 9, 17)), grid)
    assert norm_L2h(CoeffField(-2.5 * f.values, grid)) == pytest.approx(2.5 * norm_L2h(f))
    assert norm_L2h(CoeffField(np.zeros_like(f.values), grid)) == 0.0


def test_norm_H1h_requires_zero_trace(grid):
    f = make_field(grid, lambda x, y, z: np.ones_like(x))
    with pytest.raises(ValueError, match="boundary_zero"):
        norm_H1h(f)


def test_norm_H1h_constant_in_z(grid):
    vals = np.zeros((1, 9, 9, 17))
    vals[0, 3, 4, :] = 2.0
    vals = zero_boundary(vals, grid)
    f = CoeffField(vals, grid, boundary_zero=True)
    # the z-derivative is not identically zero because the trace forces a
    # jump at z = A; compare against the explicit H1 inner product instead
    assert norm_H1h(f) == pytest.approx(np.sqrt(h1_inner(vals, vals, grid)))


def test_norm_H1h_linear_profile_closed_form():
    grid = Grid(B=4, Mz=257, A=1.0, sigma=0.5)
    vals = np.zeros((1, 5, 5, 257))
    vals[0, 2, 2, :] = grid.z_nodes - grid.A
    f = CoeffField(vals, grid, boundary_zero=True)
    s = grid.sigma
    exact = grid.h ** 2 * (s ** 3 / 3.0 + s)  # int (z-A)^2 + int 1
    assert norm_H1h(f) ** 2 == pytest.approx(exact, rel=1e-3)


def test_embedding_ratio_bounded_under_refinement():
    rng = np.random.default_rng(3)
    ratios = []
    for Mz in (17, 33, 65):
        grid = Grid(B=8, Mz=Mz, A=1.0, sigma=0.5)
        worst = 0.0
        for _ in range(10):
            vals = zero_boundary(rng.standard_normal((2, 9, 9, Mz)), grid)
            f = CoeffField(vals, grid, boundary_zero=True)
            worst = max(worst, np.abs(vals).max() / norm_H1h(f))
        ratios.append(worst)
        assert np.isfinite(worst)
    # the embedding constant does not blow up as the quadrature refines
    assert max(ratios) <= 3.0 * min(ratios)


def test_boundary_zero_validation(grid):
    vals = np.ones((1, 9, 9, 17))
    with pytest.raises(ValueError, match="trace"):
        CoeffField(vals, grid, boundary_zero=True)


# ---------------------------------------------------------------------------
# file container


def test_coeff_field_roundtrip_bitexact(tmp_path, grid):
    rng = np.random.default_rng(4)
    f = CoeffField(zero_boundary(rng.standard_normal((3, 9, 9, 17)), grid),
                   grid, boundary_zero=True)
    p = tmp_path / "f.tcc"
    save_coeff_field(p, f)
    g, attrs = load_coeff_field(p)
    assert np.array_equal(g.values, f.values)
    assert g.grid == grid and g.boundary_zero


def test_scalar_field_roundtrip_bitexact(tmp_path):
    rng = np.random.default_rng(5)
    f = ScalarField3D(rng.standard_normal((4, 5, 6)), np.linspace(0, 1, 4),
                      np.linspace(0, 1, 5), np.linspace(0, 1.5, 6))
    p = tmp_path / "m.tcc"
    save_scalar_field(p, f)
    g, _ = load_scalar_field(p)
    for a, b in ((g.values, f.values), (g.xs, f.xs), (g.zs, f.zs)):
        assert np.array_equal(a, b)


def test_boundary_data_roundtrip_and_determinism(tmp_path, grid):
    rng = np.random.default_rng(6)
    S = 5
    faces = {k: rng.standard_normal((9, 17, S)) + 2 for k in BoundaryData.LATERAL}
    faces["top"] = rng.standard_normal((9, 9, S)) + 2
    fz = {k: rng.standard_normal((9, 17, S)) for k in BoundaryData.LATERAL}
    data = BoundaryData(np.linspace(0.1, 0.9, S), faces, fz,
                        rng.standard_normal((9, 9, S)),
                        rng.standard_normal((9, 9, S)), grid)
    p1, p2 = tmp_path / "d1.tcc", tmp_path / "d2.tcc"
    save_boundary_data(p1, data)
    save_boundary_data(p2, data)
    assert p1.read_bytes() == p2.read_bytes()
    back, _ = load_boundary_data(p1)
    assert np.array_equal(back.faces["x0"], data.faces["x0"])
    assert np.array_equal(back.fz["y1"], data.fz["y1"])
    assert np.array_equal(back.alphas, data.alphas)
