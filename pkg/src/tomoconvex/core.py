"""Semidiscrete geometry and field containers.

The inversion lives on a slab [0,1] x [0,1] x [A, A+sigma]: the two lateral
coordinates are discretized with a uniform step h = 1/B (finite differences),
while the depth coordinate z stays a quadrature axis with Mz trapezoid nodes.
The grid step h is a regularization parameter of the method and is never sent
to zero; Mz is a pure quadrature resolution.

Coefficient fields carry N vertical profiles per lateral node (one per basis
mode of the source-parameter expansion).  Discrete L2/H1 norms sum over the
(B-1)^2 interior lateral nodes and integrate in z by the trapezoid rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class InfeasibleError(ValueError):
    """Input violates a feasibility contract (set membership, positivity)."""


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its budget without converging."""


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class Grid:
    """Semidiscrete inversion grid.

    Lateral nodes x_i = i*h, y_j = j*h with h = 1/B, i,j = 0..B.  Depth nodes
    are Mz uniformly spaced trapezoid nodes on [A, A+sigma].
    """

    B: int
    Mz: int
    A: float
    sigma: float
    h0: float = 0.02

    def __post_init__(self):
        if self.B < 2:
            raise ValueError(f"B must be >= 2, got {self.B}")
        if self.Mz < 3:
            raise ValueError(f"Mz must be >= 3, got {self.Mz}")
        if self.A <= 0 or self.sigma <= 0:
            raise ValueError("A and sigma must be positive")
        if not (self.h0 < self.h < 1.0):
            raise ValueError(
                f"lateral step h = 1/B = {self.h:g} must lie in [h0, 1) with h0 = {self.h0:g}"
            )

    @property
    def h(self) -> float:
        return 1.0 / self.B

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.B + 1)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.B + 1)

    @property
    def z_nodes(self) -> np.ndarray:
        return np.linspace(self.A, self.A + self.sigma, self.Mz)

    @property
    def dz(self) -> float:
        return self.sigma / (self.Mz - 1)

    @property
    def z_weights(self) -> np.ndarray:
        """Trapezoid weights on [A, A+sigma]; they sum to sigma."""
        w = np.full(self.Mz, self.dz)
        w[0] = w[-1] = 0.5 * self.dz
        return w

    def attrs(self) -> dict:
        return {"B": self.B, "Mz": self.Mz, "A": self.A, "sigma": self.sigma, "h0": self.h0}


def _d_matrix(nodes: np.ndarray) -> np.ndarray:
    """Second-order first-derivative matrix on a uniform 1D grid.

    Central differences at interior nodes, one-sided three-point stencils at
    the two ends (so derivative fields are total on the closed interval).
    """
    n = len(nodes)
    if n < 3:
        raise ValueError("need at least 3 nodes for second-order differences")
    st = nodes[1] - nodes[0]
    D = np.zeros((n, n))
    for i in range(1, n - 1):
        D[i, i - 1] = -0.5 / st
        D[i, i + 1] = 0.5 / st
    D[0, 0], D[0, 1], D[0, 2] = -1.5 / st, 2.0 / st, -0.5 / st
    D[-1, -1], D[-1, -2], D[-1, -3] = 1.5 / st, -2.0 / st, 0.5 / st
    return D


def lateral_d_matrix(grid: Grid) -> np.ndarray:
    return _d_matrix(grid.xs)


def z_d_matrix(grid: Grid) -> np.ndarray:
    return _d_matrix(grid.z_nodes)


# ---------------------------------------------------------------------------
# fields


@dataclass
class CoeffField:
    """N coefficient profiles on the inversion grid: values[n, i, j, k].

    ``boundary_zero`` asserts membership in the zero-trace space: values
    vanish identically at the lateral boundary (i or j in {0, B}) and at the
    slab top boundary z = A (k = 0).
    """

    values: np.ndarray  # (N, B+1, B+1, Mz)
    grid: Grid
    boundary_zero: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        expected = (v.shape[0], self.grid.B + 1, self.grid.B + 1, self.grid.Mz)
        if v.shape != expected:
            raise ValueError(f"values shape {v.shape} does not match grid {expected}")
        self.values = v
        if self.boundary_zero:
            self.check_boundary_zero()

    @property
    def N(self) -> int:
        return self.values.shape[0]

    def check_boundary_zero(self):
        B = self.grid.B
        edges = [self.values[:, 0], self.values[:, B], self.values[:, :, 0],
                 self.values[:, :, B], self.values[:, :, :, 0]]
        worst = max(np.max(np.abs(e)) if e.size else 0.0 for e in edges)
        if worst != 0.0:
            raise ValueError(f"boundary_zero field has nonzero trace (max {worst:g})")

    def copy(self) -> "CoeffField":
        return replace(self, values=self.values.copy())


def zero_boundary(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Return a copy with the lateral boundary and the z = A slice zeroed."""
    out = np.array(values, dtype=float)
    B = grid.B
    out[:, 0, :, :] = 0.0
    out[:, B, :, :] = 0.0
    out[:, :, 0, :] = 0.0
    out[:, :, B, :] = 0.0
    out[:, :, :, 0] = 0.0
    return out


def dx_central(fld: CoeffField) -> CoeffField:
    """Lateral x-derivative: central interior, one-sided second order at i in {0,B}."""
    D = lateral_d_matrix(fld.grid)
    vals = np.einsum("ai,nijk->najk", D, fld.values)
    return CoeffField(vals, fld.grid, boundary_zero=False)


def dy_central(fld: CoeffField) -> CoeffField:
    D = lateral_d_matrix(fld.grid)
    vals = np.einsum("aj,nijk->niak", D, fld.values)
    return CoeffField(vals, fld.grid, boundary_zero=False)


def norm_L2h(fld: CoeffField) -> float:
    """sqrt( int_A^{A+sigma} h^2 sum_{n, interior i,j} v^2 dz ), z by trapezoid."""
    g = fld.grid
    v = fld.values[:, 1:g.B, 1:g.B, :]
    col = np.einsum("nijk,k->", v * v, g.z_weights)
    return float(np.sqrt(g.h ** 2 * col))


def norm_H1h(fld: CoeffField) -> float:
    """sqrt(L2h^2 + L2h(d_z .)^2); requires a zero-trace field."""
    if not fld.boundary_zero:
        raise ValueError("norm_H1h is defined on the zero-trace space; boundary_zero not set")
    return float(np.sqrt(h1_inner(fld.values, fld.values, fld.grid)))


def h1_inner(a: np.ndarray, b: np.ndarray, grid: Grid) -> float:
    """The discrete H1 scalar product [a, b] used by the optimizer."""
    B = grid.B
    Dz = z_d_matrix(grid)
    ai, bi = a[:, 1:B, 1:B, :], b[:, 1:B, 1:B, :]
    dza = np.einsum("kl,nijl->nijk", Dz, ai)
    dzb = np.einsum("kl,nijl->nijk", Dz, bi)
    s = np.einsum("nijk,nijk,k->", ai, bi, grid.z_weights)
    s += np.einsum("nijk,nijk,k->", dza, dzb, grid.z_weights)
    return grid.h ** 2 * s


def l2_inner(a: np.ndarray, b: np.ndarray, grid: Grid) -> float:
    B = grid.B
    ai, bi = a[:, 1:B, 1:B, :], b[:, 1:B, 1:B, :]
    return grid.h ** 2 * float(np.einsum("nijk,nijk,k->", ai, bi, grid.z_weights))


def max_norm(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


@dataclass
class ScalarField3D:
    """Nodal scalar values over a box grid (forward domain or inversion slab)."""

    values: np.ndarray  # (nx, ny, nz)
    xs: np.ndarray
    ys: np.ndarray
    zs: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.xs = np.asarray(self.xs, dtype=float)
        self.ys = np.asarray(self.ys, dtype=float)
        self.zs = np.asarray(self.zs, dtype=float)
        if self.values.shape != (len(self.xs), len(self.ys), len(self.zs)):
            raise ValueError("values shape does not match coordinate axes")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")


@dataclass
class BoundaryData:
    """First-arrival traces on Gamma (four lateral faces) and the top face.

    Face arrays are indexed (face nodes..., source); e.g. ``faces['x0']`` has
    shape (B+1, Mz, S) over (y_j, z_k, alpha_s).  ``fz`` holds the depth
    derivative of the traces on the lateral faces (from second-order
    differences along z); ``fx_top``/``fy_top`` the tangential derivatives on
    the top face (central differences along the face, one-sided at its rim).
    """

    alphas: np.ndarray
    faces: dict          # 'x0','x1','y0','y1' -> (B+1, Mz, S); 'top' -> (B+1, B+1, S)
    fz: dict             # lateral face keys -> (B+1, Mz, S)
    fx_top: np.ndarray   # (B+1, B+1, S)
    fy_top: np.ndarray
    grid: Grid
    requested_noise: float = 0.0

    LATERAL = ("x0", "x1", "y0", "y1")

    def edge_mismatch(self) -> float:
        """Max disagreement of shared vertical edges between lateral faces."""
        f = self.faces
        pairs = [
            (f["x0"][0], f["y0"][0]), (f["x0"][-1], f["y1"][0]),
            (f["x1"][0], f["y0"][-1]), (f["x1"][-1], f["y1"][-1]),
        ]
        return max(float(np.max(np.abs(a - b))) for a, b in pairs)
