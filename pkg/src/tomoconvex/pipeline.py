"""From boundary traces to inversion inputs.

The measured travel times enter the inversion only through derived fields:
the known top-boundary profile u0 (closed form), the boundary-compatible
extension g built from the squared depth derivative of the lateral traces,
and the truncated source-parameter expansions of g and of the top-face
traces.  A noisy variant perturbs the expansion coefficients directly with
uniform node noise of prescribed max-norm and recomputes the lateral
derivative tables from the perturbed values.

Data measured at a modest number of sources is resampled in the source
parameter onto the master quadrature grid by barycentric interpolation
(travel times are smooth in the source position, and the sources sit at
Gauss nodes, so the interpolation is stable and spectrally accurate).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .basis import AlphaQuadrature, BasisSet, project_to_basis, reconstruct
from .core import BoundaryData, CoeffField, Grid, lateral_d_matrix


@dataclass(frozen=True)
class U0Field:
    """Closed-form data floor u0(x, y, alpha) = A^2 / ((x-alpha)^2 + (y-1/2)^2 + A^2).

    z-independent; bounded below by A^2/(A^2+2) on the closed domain.  Cached
    node tables carry the analytic lateral and source-parameter derivatives.
    """

    A: float
    alphas: np.ndarray
    u0: np.ndarray      # (B+1, B+1, Q)
    u0x: np.ndarray
    u0y: np.ndarray
    du0_dalpha: np.ndarray

    @property
    def lower_bound(self) -> float:
        return self.A ** 2 / (self.A ** 2 + 2.0)


def u0_value(A: float, x, y, alpha):
    return A ** 2 / ((x - alpha) ** 2 + (y - 0.5) ** 2 + A ** 2)


def eval_u0(grid: Grid, alphas) -> U0Field:
    alphas = np.asarray(alphas, dtype=float)
    X, Y, AL = np.meshgrid(grid.xs, grid.ys, alphas, indexing="ij")
    A = grid.A
    den = (X - AL) ** 2 + (Y - 0.5) ** 2 + A ** 2
    u0 = A ** 2 / den
    u0x = -2.0 * A ** 2 * (X - AL) / den ** 2
    u0y = -2.0 * A ** 2 * (Y - 0.5) / den ** 2
    return U0Field(A=A, alphas=alphas, u0=u0, u0x=u0x, u0y=u0y, du0_dalpha=-u0x)


# ---------------------------------------------------------------------------
# source-parameter resampling


def barycentric_matrix(src_nodes: np.ndarray, dst_nodes: np.ndarray) -> np.ndarray:
    """Polynomial interpolation matrix from src_nodes onto dst_nodes."""
    src = np.asarray(src_nodes, float)
    dst = np.asarray(dst_nodes, float)
    w = np.ones(len(src))
    for j in range(len(src)):
        w[j] = 1.0 / np.prod(src[j] - np.delete(src, j))
    M = np.zeros((len(dst), len(src)))
    for i, x in enumerate(dst):
        diff = x - src
        hit = np.isclose(diff, 0.0, atol=1e-15)
        if np.any(hit):
            M[i, np.argmax(hit)] = 1.0
        else:
            terms = w / diff
            M[i] = terms / terms.sum()
    return M


def resample_boundary_data(data: BoundaryData, quad: AlphaQuadrature) -> BoundaryData:
    """Resample all per-source tables onto the quadrature nodes (no-op when
    the sources already sit there)."""
    if len(data.alphas) == quad.Q and np.allclose(data.alphas, quad.nodes, atol=1e-13):
        return data
    R = barycentric_matrix(data.alphas, quad.nodes)

    def rs(a):
        return np.einsum("qs,...s->...q", R, a)

    return BoundaryData(
        alphas=quad.nodes.copy(),
        faces={k: rs(v) for k, v in data.faces.items()},
        fz={k: rs(v) for k, v in data.fz.items()},
        fx_top=rs(data.fx_top), fy_top=rs(data.fy_top),
        grid=data.grid, requested_noise=data.requested_noise,
    )


# ---------------------------------------------------------------------------
# boundary-compatible extension


def build_g(data: BoundaryData, u0: U0Field, grid: Grid) -> np.ndarray:
    """Interior extension g with trace (f_z)^2 - u0 on the lateral boundary.

    The z = A slice is zero exactly.  Interior values blend the four lateral
    faces transfinitely (Coons patch) at each depth and source, which
    reproduces the face traces exactly.  Returns samples (B+1, B+1, Mz, S).
    """
    if len(data.alphas) != u0.u0.shape[-1] or not np.allclose(data.alphas, u0.alphas):
        raise ValueError("boundary data and u0 tables use different source parameters")
    B, Mz, S = grid.B, grid.Mz, len(data.alphas)
    # face traces of g over (edge node, z, alpha)
    gx0 = data.fz["x0"] ** 2 - u0.u0[0][:, None, :]
    gx1 = data.fz["x1"] ** 2 - u0.u0[B][:, None, :]
    gy0 = data.fz["y0"] ** 2 - u0.u0[:, 0][:, None, :]
    gy1 = data.fz["y1"] ** 2 - u0.u0[:, B][:, None, :]

    mism = max(
        np.max(np.abs(gx0[0] - gy0[0])), np.max(np.abs(gx0[-1] - gy1[0])),
        np.max(np.abs(gx1[0] - gy0[-1])), np.max(np.abs(gx1[-1] - gy1[-1])),
    )
    if mism > 1e-6:
        import warnings
        warnings.warn(f"lateral face traces disagree at shared edges by {mism:.3e}")

    x = grid.xs[:, None, None, None]   # (B+1,1,1,1)
    y = grid.ys[None, :, None, None]
    g = ((1.0 - x) * gx0[None, :, :, :] + x * gx1[None, :, :, :]
         + (1.0 - y) * gy0[:, None, :, :] + y * gy1[:, None, :, :]
         - (1.0 - x) * (1.0 - y) * gx0[None, None, 0]
         - (1.0 - x) * y * gx0[None, None, -1]
         - x * (1.0 - y) * gx1[None, None, 0]
         - x * y * gx1[None, None, -1])
    g[:, :, 0, :] = 0.0  # exact zero trace at z = A
    return g


# ---------------------------------------------------------------------------
# coefficient bundle


@dataclass
class DataBundle:
    """Truncated expansions of the data fields, with derivative tables.

    G carries the extension coefficients on the slab; F the top-face trace
    coefficients, stored as a lateral table (its z replication is implicit:
    operators read the top-face slot only).  ``g_residual``/``f_residual``
    report the per-node max truncation residual of the expansions.
    """

    grid: Grid
    N: int
    a: float
    Q: int
    G: np.ndarray        # (N, B+1, B+1, Mz)
    GX: np.ndarray
    GY: np.ndarray
    F: np.ndarray        # (N, B+1, B+1)
    FX: np.ndarray
    FY: np.ndarray
    g_residual: np.ndarray   # (B+1, B+1, Mz)
    f_residual: np.ndarray   # (B+1, B+1)
    noise: float = 0.0
    seed: int | None = None

    def coeff_field(self, which: str = "G") -> CoeffField:
        return CoeffField(getattr(self, which), self.grid, boundary_zero=False)

    def basis_attrs(self) -> dict:
        return {"N": self.N, "a": self.a, "Q": self.Q}


def _lateral_tables(coeffs: np.ndarray, grid: Grid):
    D = lateral_d_matrix(grid)
    if coeffs.ndim == 4:
        gx = np.einsum("ai,nijk->najk", D, coeffs)
        gy = np.einsum("aj,nijk->niak", D, coeffs)
    else:
        gx = np.einsum("ai,nij->naj", D, coeffs)
        gy = np.einsum("aj,nij->nia", D, coeffs)
    return gx, gy


def fourier_project_data(g: np.ndarray, f_top: np.ndarray, basis: BasisSet,
                         grid: Grid) -> DataBundle:
    """Project g samples and top-face trace samples onto the basis; build the
    lateral derivative tables by the core difference stencils; report the
    truncation residual per node."""
    G = np.moveaxis(project_to_basis(basis, g), -1, 0)
    F = np.moveaxis(project_to_basis(basis, f_top), -1, 0)
    G[:, :, :, 0] = 0.0  # the z = A samples are exactly zero; keep it exact
    g_res = np.max(np.abs(g - reconstruct(basis, np.moveaxis(G, 0, -1))), axis=-1)
    f_res = np.max(np.abs(f_top - reconstruct(basis, np.moveaxis(F, 0, -1))), axis=-1)
    GX, GY = _lateral_tables(G, grid)
    FX, FY = _lateral_tables(F, grid)
    return DataBundle(grid=grid, N=basis.N, a=basis.a, Q=basis.quad.Q,
                      G=G, GX=GX, GY=GY, F=F, FX=FX, FY=FY,
                      g_residual=g_res, f_residual=f_res)


def prepare_bundle(data: BoundaryData, basis: BasisSet, grid: Grid,
                   u0: U0Field | None = None) -> DataBundle:
    """Resample to the quadrature, build g, project: the whole prep stage."""
    data_q = resample_boundary_data(data, basis.quad)
    if u0 is None:
        u0 = eval_u0(grid, basis.quad.nodes)
    g = build_g(data_q, u0, grid)
    f_top = data_q.faces["top"]
    return fourier_project_data(g, f_top, basis, grid)


def add_noise(bundle: DataBundle, delta: float, seed: int) -> DataBundle:
    """Uniform i.i.d. node perturbations of G and F with max-norm below delta;
    derivative tables are recomputed from the perturbed coefficients."""
    if not (0.0 < delta < 1.0):
        raise ValueError(f"noise level must lie in (0, 1), got {delta}")
    rng = np.random.default_rng(seed)
    G = bundle.G + rng.uniform(-delta, delta, size=bundle.G.shape)
    F = bundle.F + rng.uniform(-delta, delta, size=bundle.F.shape)
    G[:, :, :, 0] = 0.0  # noise respects the structural zero trace at z = A
    GX, GY = _lateral_tables(G, bundle.grid)
    FX, FY = _lateral_tables(F, bundle.grid)
    return replace(bundle, G=G, GX=GX, GY=GY, F=F, FX=FX, FY=FY,
                   noise=delta, seed=seed)


# ---------------------------------------------------------------------------
# bundle serialization


def save_bundle(path, bundle: DataBundle):
    from .fileio import save_container

    attrs = dict(bundle.grid.attrs())
    attrs.update(bundle.basis_attrs())
    attrs["noise"] = bundle.noise
    attrs["seed"] = -1 if bundle.seed is None else int(bundle.seed)
    arrays = {k: getattr(bundle, k) for k in
              ("G", "GX", "GY", "F", "FX", "FY", "g_residual", "f_residual")}
    save_container(path, "data_bundle", attrs, arrays)


def load_bundle(path) -> DataBundle:
    from .fileio import load_container

    _, attrs, arr = load_container(path, "data_bundle")
    grid = Grid(B=attrs["B"], Mz=attrs["Mz"], A=attrs["A"], sigma=attrs["sigma"],
                h0=attrs["h0"])
    seed = attrs.get("seed", -1)
    return DataBundle(grid=grid, N=attrs["N"], a=attrs["a"], Q=attrs["Q"],
                      noise=attrs["noise"], seed=None if seed < 0 else seed,
                      **{k: arr[k] for k in arr})
