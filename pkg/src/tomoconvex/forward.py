"""Forward modeling: eikonal travel times, geodesic shooting, data extraction.

Travel times from each line source (alpha, 1/2, 0) solve |grad tau|^2 = m by
factored Godunov fast sweeping on a fine forward grid.  Because the medium is
constant in the layer z <= A, the travel time there is exactly the free-space
expression sqrt(m_layer) * distance; those nodes are pinned and the sweeps
only work the slab.  This removes the point-source error entirely (constant
media are reproduced to solver tolerance) and lets sources sit off-grid.

Geodesic shooting integrates the characteristic system of the eikonal
equation with an adaptive Runge-Kutta method; it serves as an independent
cross-check on the PDE solver, and the conserved quantity p^2+q^2+r^2 = m
monitors integration quality.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import RegularGridInterpolator

from . import _sweep
from .basis import AlphaQuadrature
from .core import (BoundaryData, ConvergenceError, Grid, ScalarField3D,
                   lateral_d_matrix, z_d_matrix)
from .presets import AnalyticMedium


@dataclass(frozen=True)
class SourceLine:
    """Source positions (alpha, 1/2, 0) along the acquisition segment."""

    alphas: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=float)
        if np.any(a <= 0.0) or np.any(a >= 1.0):
            raise ValueError("source parameters must lie strictly inside (0, 1)")
        object.__setattr__(self, "alphas", a)

    def positions(self):
        return [(float(a), 0.5, 0.0) for a in self.alphas]


def make_source_line(count: int) -> SourceLine:
    """Sources at the Gauss-Legendre nodes of a count-point rule on (0,1),
    so smooth-in-alpha data interpolates stably onto the master quadrature."""
    x, _ = np.polynomial.legendre.leggauss(count)
    return SourceLine(0.5 * (x + 1.0))


@dataclass(frozen=True)
class ForwardGrid:
    """Fine grid for the forward solves, aligned with the inversion grid.

    Lateral nodes refine the inversion nodes by an integer factor; the slab
    part of the z axis contains every inversion z node exactly, so data
    extraction is pure slicing.
    """

    grid: Grid
    refine: int
    xs: np.ndarray
    ys: np.ndarray
    zs: np.ndarray
    k_interface: int   # z index of the plane z = A
    slab_stride: int

    @property
    def h_fwd(self) -> float:
        return self.grid.h / self.refine

    def lateral_indices(self) -> np.ndarray:
        return np.arange(self.grid.B + 1) * self.refine

    def slab_indices(self) -> np.ndarray:
        return self.k_interface + self.slab_stride * np.arange(self.grid.Mz)


def make_forward_grid(grid: Grid, refine: int = 4, z_refine: int = 1) -> ForwardGrid:
    if refine < 1 or z_refine < 1:
        raise ValueError("refine factors must be >= 1")
    h_fwd = grid.h / refine
    hz = h_fwd / z_refine
    xs = np.linspace(0.0, 1.0, grid.B * refine + 1)
    nb = int(math.ceil(grid.A / hz - 1e-9))
    z_below = np.linspace(0.0, grid.A, nb + 1)[:-1]
    s = max(1, int(math.ceil(grid.sigma / ((grid.Mz - 1) * hz) - 1e-9)))
    z_slab = np.linspace(grid.A, grid.A + grid.sigma, (grid.Mz - 1) * s + 1)
    zs = np.concatenate([z_below, z_slab])
    return ForwardGrid(grid=grid, refine=refine, xs=xs, ys=xs.copy(), zs=zs,
                       k_interface=nb, slab_stride=s)


# ---------------------------------------------------------------------------
# eikonal solver


def _validate_medium(m: ScalarField3D, A: float):
    v = m.values
    if v.min() <= 0.0:
        raise ValueError("medium must be strictly positive")
    below = m.zs < A - 1e-12
    layer = v[:, :, below]
    if np.ptp(layer) > 1e-9:
        raise ValueError("medium must be constant in the layer z < A")
    if v.min() < layer.flat[0] - 1e-9:
        raise ValueError("medium dips below its free-space value; "
                         "the layer pinning would be inconsistent")


def solve_eikonal(m: ScalarField3D, source, A: float,
                  tol: float = 1e-9, max_passes: int = 50,
                  validate: bool = True) -> ScalarField3D:
    """First-arrival travel time from a point source on the plane z = 0.

    Converged when the largest nodal update in a full 8-ordering pass drops
    below tol * (A + sigma-extent).  Raises ConvergenceError with the residual
    if the pass budget is exhausted.
    """
    if validate:
        _validate_medium(m, A)
    sx, sy, sz = (float(c) for c in source)
    if not (0.0 < sx < 1.0) or sy != 0.5 or sz != 0.0:
        raise ValueError("source must lie on the line (alpha, 1/2, 0), alpha in (0,1)")

    slow0 = math.sqrt(m.values[0, 0, 0])  # layer slowness sqrt(m(z<A))
    X, Y, Z = np.meshgrid(m.xs, m.ys, m.zs, indexing="ij")
    dist = np.sqrt((X - sx) ** 2 + (Y - sy) ** 2 + (Z - sz) ** 2)
    safe = np.maximum(dist, 1e-300)
    T0 = slow0 * dist
    p0x = slow0 * (X - sx) / safe
    p0y = slow0 * (Y - sy) / safe
    p0z = slow0 * (Z - sz) / safe

    kmin = int(np.searchsorted(m.zs, A + 1e-12))
    tau1 = np.full(m.values.shape, _sweep.BIG)
    tau1[:, :, :kmin] = 1.0  # exact free-space factor in the constant layer

    scale = A + (m.zs[-1] - A)
    worst = np.inf
    for _ in range(max_passes):
        worst = _sweep.sweep_pass(tau1, T0, p0x, p0y, p0z, m.values,
                                  m.xs, m.ys, m.zs, kmin)
        if worst < tol * scale:
            break
    else:
        raise ConvergenceError(
            f"eikonal sweeps did not converge: residual {worst:.3e} "
            f"after {max_passes} passes (tol {tol * scale:.3e})")
    return ScalarField3D(tau1 * T0, m.xs, m.ys, m.zs)


def solve_all_sources(m: ScalarField3D, sources: SourceLine, A: float,
                      tol: float = 1e-9, workers: int | None = None):
    """Independent per-source eikonal solves, threaded (kernel releases the GIL)."""
    pos = sources.positions()
    if workers is None:
        import os
        workers = min(len(pos), os.cpu_count() or 1)
    if workers <= 1:
        return [solve_eikonal(m, p, A, tol=tol) for p in pos]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        futs = [ex.submit(solve_eikonal, m, p, A, tol=tol) for p in pos]
        return [f.result() for f in futs]


def check_tau_z_bound(tau: ScalarField3D, A: float, tol: float | None = None) -> dict:
    """Minimum discrete d_z tau over the slab versus the bound A/sqrt(A^2+2).

    The bound holds for admissible monotone media; a violation beyond the
    discretization tolerance is flagged.
    """
    kmin = int(np.searchsorted(tau.zs, A - 1e-12))
    if kmin >= len(tau.zs) - 1:
        raise ValueError(f"field has no depth nodes in the slab z >= {A}")
    tz = np.gradient(tau.values, tau.zs, axis=2)[:, :, kmin:]
    bound = A / math.sqrt(A * A + 2.0)
    if tol is None:
        steps = [np.max(np.diff(ax)) for ax in (tau.xs, tau.ys, tau.zs)]
        tol = 5.0 * max(steps)
    min_tz = float(tz.min())
    return {"min_tau_z": min_tz, "bound": bound, "margin": min_tz - bound,
            "tol": tol, "ok": bool(min_tz >= bound - tol)}


# ---------------------------------------------------------------------------
# geodesic shooting


@dataclass
class GeodesicTrajectory:
    """Sampled characteristic curve; the parameter s equals the travel time."""

    s: np.ndarray
    xyz: np.ndarray   # (n, 3)
    pqr: np.ndarray   # (n, 3)
    m_along: np.ndarray
    exit_reason: str  # 'top', 'lateral', 'bottom', 'exhausted'
    truncated: bool

    def hamiltonian_drift(self) -> float:
        h = np.sum(self.pqr ** 2, axis=1) - self.m_along
        return float(np.max(np.abs(h)))


def _medium_callables(medium, A: float):
    if isinstance(medium, AnalyticMedium):
        return (lambda x, y, z: float(medium.m(x, y, z)),
                lambda x, y, z: tuple(float(g) for g in medium.grad_m(x, y, z)))
    if isinstance(medium, ScalarField3D):
        pts = (medium.xs, medium.ys, medium.zs)
        mi = RegularGridInterpolator(pts, medium.values, method="linear")
        grads = np.gradient(medium.values, medium.xs, medium.ys, medium.zs)
        gis = [RegularGridInterpolator(pts, g, method="linear") for g in grads]

        def clamp(x, y, z):
            # constant continuation above the slab; lateral clamp for
            # mid-step evaluations just outside the box
            return (min(max(x, pts[0][0]), pts[0][-1]),
                    min(max(y, pts[1][0]), pts[1][-1]),
                    min(max(z, pts[2][0]), pts[2][-1]))

        return (lambda x, y, z: mi(clamp(x, y, z)).item(),
                lambda x, y, z: tuple(g(clamp(x, y, z)).item() for g in gis))
    raise TypeError("medium must be an AnalyticMedium or a ScalarField3D")


def shoot_geodesic(medium, alpha: float, p0: float, q0: float, A: float,
                   sigma: float, rtol: float = 1e-10, atol: float = 1e-12,
                   max_s: float | None = None) -> GeodesicTrajectory:
    """Integrate the characteristic system from the source (alpha, 1/2, 0).

    Takeoff momenta (p0, q0) must satisfy p0^2 + q0^2 <= m(source); the
    vertical momentum starts at +sqrt(m(source) - p0^2 - q0^2), which is
    +sqrt(1 - p0^2 - q0^2) for admissible media (unit layer below the slab);
    downgoing rays are excluded by the geometry.  Integration stops on exit
    through the slab top, a lateral face, or the z = 0 plane.
    """
    m_at, grad_at = _medium_callables(medium, A)
    m_src = m_at(alpha, 0.5, 0.0)
    if p0 * p0 + q0 * q0 > m_src:
        raise ValueError("takeoff momenta must satisfy p0^2 + q0^2 <= m(source)")
    r0 = math.sqrt(max(0.0, m_src - p0 * p0 - q0 * q0))
    y0 = np.array([alpha, 0.5, 0.0, p0, q0, r0])
    top = A + sigma
    if max_s is None:
        max_s = 10.0 * (A + sigma) * math.sqrt(m_at(0.5, 0.5, top - 1e-9))

    def rhs(s, y):
        x, yy, z, p, q, r = y
        m = m_at(x, yy, z)
        gx, gy, gz = grad_at(x, yy, z)
        return [p / m, q / m, r / m, gx / (2 * m), gy / (2 * m), gz / (2 * m)]

    def ev_top(s, y):
        return y[2] - top

    def ev_bottom(s, y):
        return y[2]

    def ev_x0(s, y):
        return y[0]

    def ev_x1(s, y):
        return y[0] - 1.0

    def ev_y0(s, y):
        return y[1]

    def ev_y1(s, y):
        return y[1] - 1.0

    events = [ev_top, ev_bottom, ev_x0, ev_x1, ev_y0, ev_y1]
    names = ["top", "bottom", "lateral", "lateral", "lateral", "lateral"]
    for ev in events:
        ev.terminal = True
    ev_bottom.direction = -1.0

    sol = solve_ivp(rhs, (0.0, max_s), y0, method="RK45", rtol=rtol, atol=atol,
                    events=events, dense_output=False, max_step=0.05 * (A + sigma))
    exit_reason = "exhausted"
    for ev_idx, te in enumerate(sol.t_events):
        if len(te):
            exit_reason = names[ev_idx]
            break
    xyz = sol.y[:3].T
    pqr = sol.y[3:].T
    m_along = np.array([m_at(*pt) for pt in xyz])
    return GeodesicTrajectory(
        s=sol.t, xyz=xyz, pqr=pqr, m_along=m_along, exit_reason=exit_reason,
        truncated=(exit_reason == "exhausted" or not sol.success))


# ---------------------------------------------------------------------------
# boundary data extraction


def extract_boundary_data(taus, fgrid: ForwardGrid, alphas) -> BoundaryData:
    """Restrict travel-time fields to the measured faces and build the
    derivative tables (depth differences on the lateral faces, tangential
    differences on the top face), all on the inversion grid."""
    grid = fgrid.grid
    li = fgrid.lateral_indices()
    ki = fgrid.slab_indices()
    S = len(taus)
    Bp = grid.B + 1

    faces = {key: np.zeros((Bp, grid.Mz, S)) for key in BoundaryData.LATERAL}
    faces["top"] = np.zeros((Bp, Bp, S))
    for s, tf in enumerate(taus):
        v = tf.values
        faces["x0"][:, :, s] = v[0][np.ix_(li, ki)]
        faces["x1"][:, :, s] = v[-1][np.ix_(li, ki)]
        faces["y0"][:, :, s] = v[:, 0][np.ix_(li, ki)]
        faces["y1"][:, :, s] = v[:, -1][np.ix_(li, ki)]
        faces["top"][:, :, s] = v[:, :, ki[-1]][np.ix_(li, li)]

    Dz = z_d_matrix(grid)
    fz = {key: np.einsum("kl,jls->jks", Dz, faces[key]) for key in BoundaryData.LATERAL}
    Dlat = lateral_d_matrix(grid)
    fx_top = np.einsum("ia,ajs->ijs", Dlat, faces["top"])
    fy_top = np.einsum("ja,ias->ijs", Dlat, faces["top"])
    return BoundaryData(alphas=np.asarray(alphas, float), faces=faces, fz=fz,
                        fx_top=fx_top, fy_top=fy_top, grid=grid)


def synthesize_boundary_data(medium: AnalyticMedium, grid: Grid,
                             sources: SourceLine, refine: int = 4,
                             tol: float = 1e-9, workers: int | None = None):
    """Full data stage: sample the medium on the forward grid, run all
    eikonal solves, extract the boundary tables.  Returns (data, m_fine)."""
    fgrid = make_forward_grid(grid, refine)
    m_fine = medium.sample(fgrid.xs, fgrid.ys, fgrid.zs)
    taus = solve_all_sources(m_fine, sources, grid.A, tol=tol, workers=workers)
    return extract_boundary_data(taus, fgrid, sources.alphas), m_fine
