"""The nonlinear depth-Volterra operator and the convex constraint set.

``evaluate_P`` realizes the coefficient-space fixed point W = M^{-1} P(W):
per lateral column, reconstruct the data-plus-unknown field u on the source
quadrature, accumulate the downward Volterra integrals of u_x/(2 sqrt u) and
u_y/(2 sqrt u) from the slab top, square the bracket terms, differentiate in
the source parameter with fourth-order stencils, project onto the basis and
apply M^{-1}.  The value at a depth node depends only on depths above it
(causal triangular structure), which is what the exponential weight exploits.

``linearized_P`` is the exact directional derivative of the same
discretization; the optimizer's gradient is its adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from functools import partial

_einsum = partial(np.einsum, optimize=True)

from .basis import BasisSet, certificate_components, reconstruct
from .core import CoeffField, Grid, InfeasibleError, h1_inner, lateral_d_matrix
from .pipeline import DataBundle, U0Field, eval_u0


def carleman_weight(z, lam: float):
    """The exponential depth weight e^{2 lambda z}."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return np.exp(2.0 * lam * np.asarray(z, dtype=float))


def scaled_carleman_weight(z, lam: float, A: float):
    """Overflow-safe form e^{2 lambda (z - A)} (the plain weight times e^{-2 lambda A})."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return np.exp(2.0 * lam * (np.asarray(z, dtype=float) - A))


def check_volterra_smoothing(p: np.ndarray, zs: np.ndarray, lam: float) -> dict:
    """Trapezoid check of the weighted Volterra smoothing estimate.

    LHS = int e^{2 lam z} (int_z^top |p|) dz, RHS = (1/(2 lam)) int |p| e^{2 lam z} dz;
    the estimate asserts LHS <= RHS for every integrable p and lam > 0.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    p = np.abs(np.asarray(p, dtype=float))
    zs = np.asarray(zs, dtype=float)
    inner = _reverse_cumtrapz(p[None, None, None, :], np.diff(zs))[0, 0, 0]
    w = carleman_weight(zs, lam)
    lhs = float(np.trapezoid(w * inner, zs))
    rhs = float(np.trapezoid(w * p, zs) / (2.0 * lam))
    tol = 1e-12 * max(1.0, abs(rhs))
    return {"lhs": lhs, "rhs": rhs, "ok": bool(lhs <= rhs + tol)}


# ---------------------------------------------------------------------------
# finite differences on the source-parameter quadrature grid


def fd_weights(x: np.ndarray, x0: float, m: int) -> np.ndarray:
    """Fornberg weights for the m-th derivative at x0 from nodes x."""
    n = len(x)
    c = np.zeros((n, m + 1))
    c[0, 0] = 1.0
    c1 = 1.0
    c4 = x[0] - x0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - x0
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, m]


def alpha_derivative_matrix(nodes: np.ndarray, width: int = 5) -> np.ndarray:
    """Fourth-order first-derivative matrix on the (nonuniform) quadrature
    nodes: five-point stencils, one-sided at the ends."""
    Q = len(nodes)
    if Q < width:
        raise ValueError(f"need at least {width} quadrature nodes")
    D = np.zeros((Q, Q))
    half = width // 2
    for q in range(Q):
        lo = min(max(q - half, 0), Q - width)
        idx = np.arange(lo, lo + width)
        D[q, idx] = fd_weights(nodes[idx], nodes[q], 1)
    return D


# ---------------------------------------------------------------------------
# workspace


def _reverse_cumtrapz(f: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """I[..., k] = integral from z_k to the top along the depth axis -2
    (trapezoid); seg holds the consecutive node spacings."""
    c = 0.5 * seg[:, None] * (f[..., :-1, :] + f[..., 1:, :])
    prefix = np.cumsum(c, axis=-2)
    out = np.empty_like(f)
    out[..., -1, :] = 0.0
    total = prefix[..., -1, :]
    out[..., 0, :] = total
    out[..., 1:-1, :] = total[..., None, :] - prefix[..., :-1, :]
    return out


def _reverse_cumtrapz_adjoint(cot: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """Transpose of the reverse prefix sums: forward prefix sums."""
    S = np.cumsum(cot[..., :-1, :], axis=-2)  # S[..., j] = sum_{k<=j} cot_k
    hS = 0.5 * seg[:, None] * S
    out = np.zeros_like(cot)
    out[..., :-1, :] += hS
    out[..., 1:, :] += hS
    return out


@dataclass
class OperatorContext:
    """Cached bundle-dependent tables shared by all operator evaluations."""

    grid: Grid
    basis: BasisSet
    u0: U0Field
    bundle: DataBundle
    u_floor: float = None  # type: ignore[assignment]
    g_q: np.ndarray = field(init=False)
    gx_q: np.ndarray = field(init=False)
    gy_q: np.ndarray = field(init=False)
    fx_q: np.ndarray = field(init=False)
    fy_q: np.ndarray = field(init=False)
    MG: np.ndarray = field(init=False)
    PU0A: np.ndarray = field(init=False)
    Dalpha: np.ndarray = field(init=False)
    zseg: np.ndarray = field(init=False)
    Dlat: np.ndarray = field(init=False)

    def __post_init__(self):
        b, grid = self.basis, self.grid
        if (self.bundle.N, self.bundle.Q) != (b.N, b.quad.Q) or self.bundle.a != b.a:
            raise InfeasibleError("bundle basis parameters do not match the basis")
        if self.u0.u0.shape != (grid.B + 1, grid.B + 1, b.quad.Q):
            raise InfeasibleError("u0 tables do not match grid/quadrature")
        if self.u_floor is None:
            self.u_floor = 1e-3 * self.u0.lower_bound
        Mz = grid.Mz
        self.g_q = reconstruct(b, np.moveaxis(self.bundle.G, 0, -1))
        self.gx_q = reconstruct(b, np.moveaxis(self.bundle.GX, 0, -1))
        self.gy_q = reconstruct(b, np.moveaxis(self.bundle.GY, 0, -1))
        self.fx_q = reconstruct(b, np.moveaxis(self.bundle.FX, 0, -1))
        self.fy_q = reconstruct(b, np.moveaxis(self.bundle.FY, 0, -1))
        self.MG = _einsum("mn,nijk->mijk", b.M, self.bundle.G)
        self.PU0A = _einsum("ijq,nq,q->nij", self.u0.du0_dalpha, b.psi, b.quad.weights)
        self.Dalpha = alpha_derivative_matrix(b.quad.nodes)
        self.zseg = np.diff(grid.z_nodes)
        self.Dlat = lateral_d_matrix(grid)
        # hot-loop tables, replicated along z so broadcasting never fights a
        # zero-stride middle axis; the x/y channels are stacked up front
        rep = lambda a: np.ascontiguousarray(np.repeat(a[:, :, None, :], Mz, axis=2))
        self.U0B = rep(self.u0.u0)
        self.U0XY = np.stack([rep(self.u0.u0x), rep(self.u0.u0y)])
        self.GXY_q = np.stack([self.gx_q, self.gy_q])
        self.FXY_q = np.stack([rep(self.fx_q), rep(self.fy_q)])
        self.psiW = b.psi * b.quad.weights


def make_context(bundle: DataBundle, basis: BasisSet,
                 u0: U0Field | None = None, u_floor: float | None = None) -> OperatorContext:
    if u0 is None:
        u0 = eval_u0(bundle.grid, basis.quad.nodes)
    return OperatorContext(grid=bundle.grid, basis=basis, u0=u0, bundle=bundle,
                           u_floor=u_floor)


class _ForwardState:
    """Intermediates of one operator evaluation, kept for the linearization.
    The x and y bracket channels are stacked along a leading axis."""

    __slots__ = ("w_q", "S", "u", "xi", "b")


def _forward_state(W: np.ndarray, ctx: OperatorContext) -> _ForwardState:
    b = ctx.basis
    st = _ForwardState()
    WXY = np.stack([_einsum("ai,nijk->najk", ctx.Dlat, W),
                    _einsum("aj,nijk->niak", ctx.Dlat, W)])
    w_q = _einsum("nijk,nq->ijkq", W, b.psi)
    wxy_q = _einsum("cnijk,nq->cijkq", WXY, b.psi)
    u = ctx.U0B + w_q
    u += ctx.g_q
    umin = u.min()
    if umin < ctx.u_floor:
        loc = np.unravel_index(int(np.argmin(u)), u.shape)
        raise InfeasibleError(
            f"positivity floor breached: u = {umin:.3e} < {ctx.u_floor:.3e} "
            f"at node (i={loc[0]}, j={loc[1]}, k={loc[2]}, q={loc[3]})")
    S = np.sqrt(u)
    xi = ctx.U0XY + wxy_q
    xi += ctx.GXY_q
    xi /= 2.0 * S
    st.w_q, st.S, st.u, st.xi = w_q, S, u, xi
    st.b = ctx.FXY_q - _reverse_cumtrapz(xi, ctx.zseg)
    return st


def _project_alpha(ds2: np.ndarray, ctx: OperatorContext) -> np.ndarray:
    b = ctx.basis
    return _einsum("ijkq,nq,q->nijk", ds2, b.psi, b.quad.weights)


def evaluate_P(W: np.ndarray | CoeffField, ctx: OperatorContext,
               state: _ForwardState | None = None) -> np.ndarray:
    """M^{-1} P(W): the fixed-point right-hand side on every lateral node.

    The residual of the coefficient equation is W - evaluate_P(W); it is
    measured over interior lateral nodes.
    """
    Wv = W.values if isinstance(W, CoeffField) else np.asarray(W, dtype=float)
    st = state or _forward_state(Wv, ctx)
    s2 = st.b[0] ** 2 + st.b[1] ** 2
    ds2 = s2 @ ctx.Dalpha.T
    rhs = -ctx.PU0A[:, :, :, None] - ctx.MG - _project_alpha(ds2, ctx)
    return _einsum("mn,nijk->mijk", ctx.basis.M_inv, rhs)


def linearized_P(W: np.ndarray | CoeffField, direction: np.ndarray | CoeffField,
                 ctx: OperatorContext, state: _ForwardState | None = None) -> np.ndarray:
    """Directional derivative of evaluate_P at W along ``direction``."""
    Wv = W.values if isinstance(W, CoeffField) else np.asarray(W, dtype=float)
    Dv = direction.values if isinstance(direction, CoeffField) else np.asarray(direction, float)
    st = state or _forward_state(Wv, ctx)
    b = ctx.basis
    DXY = np.stack([_einsum("ai,nijk->najk", ctx.Dlat, Dv),
                    _einsum("aj,nijk->niak", ctx.Dlat, Dv)])
    dw = _einsum("nijk,nq->ijkq", Dv, b.psi)
    dwxy = _einsum("cnijk,nq->cijkq", DXY, b.psi)
    dxi = dwxy / (2.0 * st.S) - st.xi * (dw / (2.0 * st.u))
    db = -_reverse_cumtrapz(dxi, ctx.zseg)
    ds2 = (2.0 * (st.b[0] * db[0] + st.b[1] * db[1])) @ ctx.Dalpha.T
    return -_einsum("mn,nijk->mijk", ctx.basis.M_inv, _project_alpha(ds2, ctx))


def adjoint_P(W: np.ndarray, cot: np.ndarray, ctx: OperatorContext,
              state: _ForwardState | None = None) -> np.ndarray:
    """Transpose of ``linearized_P`` in the plain coefficient pairing:
    sum(linearized_P(W, D) * C) == sum(D * adjoint_P(W, C)) for all D, C."""
    st = state or _forward_state(np.asarray(W, float), ctx)
    b = ctx.basis
    c_rhs = -_einsum("mn,mijk->nijk", ctx.basis.M_inv, cot)
    c_ds2 = _einsum("nijk,nq->ijkq", c_rhs, ctx.psiW)
    c_s2 = c_ds2 @ ctx.Dalpha
    c_xi = _reverse_cumtrapz_adjoint(-2.0 * st.b * c_s2, ctx.zseg)
    c_wxy = c_xi / (2.0 * st.S)
    c_w = -(c_xi[0] * st.xi[0] + c_xi[1] * st.xi[1]) / (2.0 * st.u)
    out = _einsum("ijkq,nq->nijk", c_w, b.psi)
    cWXY = _einsum("cijkq,nq->cnijk", c_wxy, b.psi)
    out += _einsum("ai,najk->nijk", ctx.Dlat, cWXY[0])
    out += _einsum("aj,niak->nijk", ctx.Dlat, cWXY[1])
    return out


# ---------------------------------------------------------------------------
# convex constraint set


@dataclass(frozen=True)
class ConvexSetParams:
    """Ball radius and positivity floor of the feasible set.

    ``mode`` selects which positivity condition cuts the convex set:

    * 'floor' (solver default) bounds the full field away from zero,
      u0 + w + g >= eps_pos at every quadrature node -- exactly what keeps
      1/sqrt(u) finite.  The data-consistent solution sits far inside, so
      the constraint stays inactive along normal runs.
    * 'pointwise' demands w + g >= eps_pos (the set the projection theory is
      stated on).  Truncation wiggles push even the projected exact solution
      a little below zero, so this constraint is permanently active.
    * 'certificate' demands the per-node sufficient certificate: all
      components of X^T (W + G) at or above eps_pos.  Sufficient-only and
      much stronger than positivity; kept as the diagnostic it is.
    """

    R: float
    eps_pos: float | None = None
    mode: str = "floor"

    def __post_init__(self):
        if self.R <= 0:
            raise ValueError("R must be positive")
        if self.eps_pos is not None and self.eps_pos <= 0:
            raise ValueError("eps_pos must be positive")
        if self.mode not in ("floor", "pointwise", "certificate"):
            raise ValueError("mode must be 'floor', 'pointwise' or 'certificate'")

    def floor(self, u0: U0Field) -> float:
        return self.eps_pos if self.eps_pos is not None else 1e-3 * u0.lower_bound


@dataclass(frozen=True)
class SetMembership:
    inside: bool
    reason: str | None = None          # None | 'norm' | 'positivity'
    worst: float | None = None
    location: tuple | None = None

    def __bool__(self):
        return self.inside


def _positivity_margin(W: np.ndarray, ctx: OperatorContext, params: ConvexSetParams):
    """Worst positivity margin over the adjustable nodes (interior lateral,
    k >= 1; the zero-trace structure pins everything else)."""
    B = ctx.grid.B
    if params.mode == "certificate":
        comp = certificate_components(ctx.basis, W + ctx.bundle.G)
        sl = comp[:, 1:B, 1:B, 1:]
    else:
        vq = _einsum("nijk,nq->ijkq", W + ctx.bundle.G, ctx.basis.psi)
        if params.mode == "floor":
            vq = vq + ctx.U0B
        sl = np.moveaxis(vq[1:B, 1:B, 1:, :], -1, 0)
    worst = float(sl.min())
    loc = np.unravel_index(int(np.argmin(sl)), sl.shape)
    location = (loc[0], loc[1] + 1, loc[2] + 1, loc[3] + 1)
    return worst, location


def set_membership(W: np.ndarray | CoeffField, ctx: OperatorContext,
                   params: ConvexSetParams, tol: float = 1e-12) -> SetMembership:
    """Inside iff the H1 norm is at most R and the positivity condition of the
    chosen mode holds with floor eps_pos at every adjustable node."""
    fld = W if isinstance(W, CoeffField) else CoeffField(W, ctx.grid, boundary_zero=True)
    from .core import norm_H1h

    nrm = norm_H1h(fld)
    if nrm > params.R * (1.0 + tol):
        return SetMembership(False, "norm", worst=nrm, location=None)
    eps = params.floor(ctx.u0)
    worst, loc = _positivity_margin(fld.values, ctx, params)
    if worst < eps - tol * max(1.0, eps):
        return SetMembership(False, "positivity", worst=worst, location=loc)
    return SetMembership(True)
