"""Weighted convex functional, its adjoint gradient, and gradient projection.

The functional

    J(W) = || (W - M^{-1} P(W)) e^{lambda (z - A)} ||_{L2h}^2 + gamma ||W||_{H1h}^2

is minimized over the convex feasible set (H1 ball intersected with the
positivity set) by W_n = proj(W_{n-1} - rho grad J).  The gradient is the
Riesz representative in the discrete H1 scalar product: the L2-type partial
derivatives are pushed through a per-column tridiagonal-like solve, so the
step lives in the same space as the set.  The exponential depth weight is
applied in the overflow-safe scaled form.

A step that raises J is rejected; five consecutive rejections halve rho
(bounded by three halvings, then the run aborts as divergent).  This keeps J
non-increasing along accepted iterations while preserving plain fixed-step
semantics whenever the step size is adequate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from functools import partial

_einsum = partial(np.einsum, optimize=True)

from .basis import BasisSet, project_to_basis, reconstruct
from .core import (CoeffField, ConvergenceError, Grid, InfeasibleError, ScalarField3D,
                   h1_inner, l2_inner, max_norm, norm_H1h, norm_L2h, z_d_matrix,
                   zero_boundary)
from .operator import (ConvexSetParams, OperatorContext, _forward_state,
                       _positivity_margin, adjoint_P, evaluate_P,
                       scaled_carleman_weight, set_membership)
from .pipeline import DataBundle


@dataclass
class SolverConfig:
    """Gradient-projection settings; gamma defaults to the clean-data value
    and should be set to delta^2 when the noise level delta is known."""

    lam: float = 1.0
    gamma: float = 1e-6
    rho: float = 0.3
    R: float = 5.0
    eps_pos: float | None = None
    set_mode: str = "floor"
    max_iter: int = 2000
    stop_tol: float = 1e-8
    start: str = "zero"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if not (0.0 < self.rho < 1.0):
            raise ValueError("rho must lie in (0, 1)")
        if self.max_iter < 1 or self.stop_tol <= 0:
            raise ValueError("max_iter and stop_tol must be positive")

    def set_params(self) -> ConvexSetParams:
        return ConvexSetParams(R=self.R, eps_pos=self.eps_pos, mode=self.set_mode)


class DivergenceError(ConvergenceError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


# ---------------------------------------------------------------------------
# functional and gradient


def _interior_mask(grid: Grid) -> np.ndarray:
    m = np.zeros((grid.B + 1, grid.B + 1))
    m[1:grid.B, 1:grid.B] = 1.0
    return m


class _RieszSolver:
    """Per-column solve of the discrete (I - d_z^2) problem with zero trace at
    z = A, converting L2-type partial derivatives into the H1 representative."""

    def __init__(self, grid: Grid):
        Dz = z_d_matrix(grid)
        Z = np.diag(grid.z_weights)
        Afull = Z + Dz.T @ Z @ Dz
        self.Ainv = np.linalg.inv(Afull[1:, 1:])
        self.grid = grid

    def apply(self, partials: np.ndarray) -> np.ndarray:
        g = self.grid
        out = np.zeros_like(partials)
        cols = partials[:, 1:g.B, 1:g.B, 1:] / g.h ** 2
        out[:, 1:g.B, 1:g.B, 1:] = _einsum("kl,nijl->nijk", self.Ainv, cols)
        return out


def _value_parts(W: np.ndarray, ctx: OperatorContext, cfg: SolverConfig):
    grid = ctx.grid
    st = _forward_state(W, ctx)
    P = evaluate_P(W, ctx, state=st)
    r = W - P
    omega = scaled_carleman_weight(grid.z_nodes, cfg.lam, grid.A)
    mask = _interior_mask(grid)
    wsum = float(_einsum("nijk,ij,k->", r * r, mask, grid.z_weights * omega))
    res2 = grid.h ** 2 * wsum
    reg2 = h1_inner(W, W, grid)
    return res2 + cfg.gamma * reg2, res2, reg2, r, st, omega, mask


def eval_J(W: np.ndarray | CoeffField, ctx: OperatorContext, cfg: SolverConfig) -> dict:
    """Value of the weighted functional plus its two norms.

    residual_norm is the exponentially weighted L2h norm of W - M^{-1}P(W);
    reg_norm the H1h norm of W.  Raises InfeasibleError when the positivity
    floor is breached during evaluation.
    """
    Wv = W.values if isinstance(W, CoeffField) else np.asarray(W, dtype=float)
    value, res2, reg2, _, _, _, _ = _value_parts(Wv, ctx, cfg)
    return {"value": value, "residual_norm": float(np.sqrt(res2)),
            "reg_norm": float(np.sqrt(reg2))}


def grad_J(W: np.ndarray | CoeffField, ctx: OperatorContext, cfg: SolverConfig,
           riesz: _RieszSolver | None = None) -> np.ndarray:
    """H1 Riesz representative of the derivative of J (zero-trace field)."""
    Wv = W.values if isinstance(W, CoeffField) else np.asarray(W, dtype=float)
    _, _, _, grad = _value_and_grad(Wv, ctx, cfg, riesz or _RieszSolver(ctx.grid))
    return grad


def _value_and_grad(W: np.ndarray, ctx: OperatorContext, cfg: SolverConfig,
                    riesz: _RieszSolver):
    grid = ctx.grid
    value, res2, reg2, r, st, omega, mask = _value_parts(W, ctx, cfg)
    zw = grid.z_weights * omega
    rbar = 2.0 * grid.h ** 2 * r * mask[None, :, :, None] * zw[None, None, None, :]
    partial = rbar + adjoint_P(W, -rbar, ctx, state=st)
    Dz = z_d_matrix(grid)
    Z = grid.z_weights
    reg_part = _einsum("k,nijk->nijk", Z, W) + _einsum(
        "lk,l,lm,nijm->nijk", Dz, Z, Dz, W)
    partial += 2.0 * cfg.gamma * grid.h ** 2 * reg_part
    partial = zero_boundary(partial, grid)
    return value, res2, reg2, riesz.apply(partial)


# ---------------------------------------------------------------------------
# projection onto the feasible set


def _lift_positivity(Wv: np.ndarray, ctx: OperatorContext, params: ConvexSetParams,
                     floor: float | None = None, max_outer: int = 80) -> np.ndarray:
    """Raise the positivity margin to the floor and re-zero the trace.

    Certificate mode clips exactly in the transformed coordinates.  Pointwise
    mode enforces the floor per grid node by a min-norm coefficient increment
    on the violated quadrature subset (tiny normal-equation solves); knock-on
    dips at other nodes are mopped up by the outer rounds.
    """
    b, grid = ctx.basis, ctx.grid
    eps = params.floor(ctx.u0) if floor is None else floor
    B = grid.B
    out = zero_boundary(Wv, grid)
    if params.mode == "certificate":
        Xinv = np.linalg.inv(b.X)
        for _ in range(3):
            comp = _einsum("nm,nijk->mijk", b.X, out + ctx.bundle.G)
            lift = np.maximum(eps + 1e-12 - comp, 0.0)
            lift[:, 0, :, :] = lift[:, B, :, :] = 0.0
            lift[:, :, 0, :] = lift[:, :, B, :] = 0.0
            lift[:, :, :, 0] = 0.0
            out = zero_boundary(out + _einsum("mn,mijk->nijk", Xinv, lift), grid)
            if _positivity_margin(out, ctx, params)[0] >= eps:
                return out
        raise InfeasibleError("certificate clip failed to reach the floor")

    psi = b.psi
    gram_reg = 1e-12 * np.eye(psi.shape[1])
    for _ in range(max_outer):
        vq = _einsum("nijk,nq->ijkq", out + ctx.bundle.G, psi)
        if params.mode == "floor":
            vq = vq + ctx.U0B
        short = eps - vq[1:B, 1:B, 1:, :]
        if short.max() < 0.0:
            return out
        nodes = np.argwhere(np.any(short > 0.0, axis=-1))
        for i_, j_, k_ in nodes:
            i, j, k = i_ + 1, j_ + 1, k_ + 1
            s = short[i_, j_, k_]
            V = np.flatnonzero(s > 0.0)
            pad = 1e-12 + 0.1 * float(s[V].max())
            lift = s[V] + pad
            A = psi[:, V]
            AtA = A.T @ A + gram_reg[: len(V), : len(V)]
            if len(V) <= psi.shape[0]:
                lam = np.linalg.solve(AtA, lift)
            else:
                lam = np.linalg.lstsq(AtA, lift, rcond=None)[0]
            out[:, i, j, k] += A @ lam
    raise InfeasibleError("feasibility map failed to reach the positivity set; "
                          "the data bundle may be incompatible with the floor")


def _interior_point(ctx: OperatorContext, params: ConvexSetParams) -> np.ndarray:
    """A cached strictly feasible point: the positivity lift of zero with
    margin headroom above the floor (used for ball blending and sampling)."""
    cache = getattr(ctx, "_interior_cache", None)
    if cache is None:
        cache = {}
        ctx._interior_cache = cache
    key = (params.mode, params.R, params.eps_pos)
    if key not in cache:
        head = params.floor(ctx.u0) + 0.05 * ctx.u0.lower_bound
        W0 = _lift_positivity(np.zeros_like(ctx.bundle.G), ctx, params, floor=head)
        nrm = norm_H1h(CoeffField(W0, ctx.grid, boundary_zero=True))
        if nrm > params.R:
            raise InfeasibleError(
                f"the feasible set is (nearly) empty: the interior positivity "
                f"lift has H1 norm {nrm:.3g} > R = {params.R:.3g}")
        cache[key] = W0
    return cache[key]


def project_to_set(W: np.ndarray | CoeffField, ctx: OperatorContext,
                   params: ConvexSetParams) -> np.ndarray:
    """Composite feasibility map: (a) raise the positivity margin to the
    floor, re-zeroing the trace; (b) if the H1 norm exceeds R, rescale by
    R/norm, or, when plain rescaling breaks positivity, blend toward a
    feasible interior point (margins are concave in W, so the blend stays in
    the positivity set while meeting the ball exactly).

    Feasible inputs are returned unchanged bit for bit.  This is not the
    metric projection (the paper leaves that operator abstract); it lands in
    the set and fixes its points, which is what the iteration consumes.
    """
    Wv = W.values if isinstance(W, CoeffField) else np.asarray(W, dtype=float)
    if set_membership(Wv, ctx, params).inside:
        return Wv
    grid = ctx.grid
    out = _lift_positivity(zero_boundary(Wv, grid), ctx, params)
    nrm = norm_H1h(CoeffField(out, grid, boundary_zero=True))
    if nrm > params.R:
        scaled = out * (params.R / nrm)
        if set_membership(scaled, ctx, params).inside:
            return scaled
        W0 = _interior_point(ctx, params)
        d = out - W0
        a = h1_inner(d, d, grid)
        bq = h1_inner(d, W0, grid)
        c = h1_inner(W0, W0, grid)
        theta = (-bq + np.sqrt(bq * bq + a * (params.R ** 2 - c))) / a
        out = min(theta, 1.0) * (1.0 - 1e-13) * d + W0
    if not set_membership(out, ctx, params).inside:
        raise InfeasibleError("feasibility map did not land in the set")
    return out


def random_feasible_point(ctx: OperatorContext, params: ConvexSetParams,
                          seed: int, scale: float = 0.25,
                          smooth: bool = True) -> np.ndarray:
    """A reproducible random point of the feasible set (for probes/starts).

    Constructive: a random zero-trace direction is added to the strictly
    interior point with an amplitude that keeps the positivity margin above
    the floor (margins are concave in W), then ball-projected if needed.
    """
    rng = np.random.default_rng(seed)
    grid = ctx.grid
    raw = rng.standard_normal((ctx.basis.N, grid.B + 1, grid.B + 1, grid.Mz))
    if smooth:  # damp the checkerboard content: average over node neighborhoods
        for axis in (1, 2, 3):
            raw = 0.5 * raw + 0.25 * (np.roll(raw, 1, axis=axis) + np.roll(raw, -1, axis=axis))
    raw = zero_boundary(raw, grid)
    nrm = norm_H1h(CoeffField(raw, grid, boundary_zero=True))
    if nrm == 0.0:
        return _interior_point(ctx, params).copy()
    raw *= scale * params.R / nrm
    W0 = _interior_point(ctx, params)
    eps = params.floor(ctx.u0)
    head, _ = _positivity_margin(W0, ctx, params)
    if params.mode == "certificate":
        swing = np.abs(_einsum("nm,nijk->mijk", ctx.basis.X, raw)).max()
    else:
        swing = np.abs(_einsum("nijk,nq->ijkq", raw, ctx.basis.psi)).max()
    t = min(1.0, 0.9 * (head - eps) / max(swing, 1e-300))
    return project_to_set(W0 + t * raw, ctx, params)


# ---------------------------------------------------------------------------
# gradient projection iteration


@dataclass
class IterationTrace:
    j_values: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    clipped: list = field(default_factory=list)     # feasibility map engaged
    scaled: list = field(default_factory=list)      # ball rescaling engaged
    rhos: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""

    def rows(self):
        hdr = ["iter", "J", "residual_norm", "step_norm", "clipped", "scaled",
               "rho", "accepted"]
        rows = [hdr]
        for i in range(len(self.j_values)):
            rows.append([i + 1, repr(self.j_values[i]), repr(self.residual_norms[i]),
                         repr(self.step_norms[i]), int(self.clipped[i]),
                         int(self.scaled[i]), repr(self.rhos[i]), int(self.accepted[i])])
        return rows


def gradient_projection(W0: np.ndarray | CoeffField, ctx: OperatorContext,
                        cfg: SolverConfig):
    """Minimize J over the feasible set from W0.  Returns (W_min, trace).

    Raises DivergenceError (with the partial trace attached) if J keeps
    increasing after three step halvings.
    """
    params = cfg.set_params()
    grid = ctx.grid
    W = np.asarray(W0.values if isinstance(W0, CoeffField) else W0, dtype=float).copy()
    if not set_membership(W, ctx, params).inside:
        raise InfeasibleError("starting point is outside the feasible set")
    riesz = _RieszSolver(grid)
    trace = IterationTrace()
    rho = cfg.rho
    halvings = 0
    any_accept = False
    J_cur, res2, _, grad = _value_and_grad(W, ctx, cfg, riesz)
    t0 = time.perf_counter()
    for _ in range(cfg.max_iter):
        pre = set_membership(W - rho * grad, ctx, params)
        cand = project_to_set(W - rho * grad, ctx, params)
        step = norm_H1h(CoeffField(cand - W, grid, boundary_zero=True))
        Jc, resc2, _, gradc = _value_and_grad(cand, ctx, cfg, riesz)
        accept = Jc <= J_cur * (1.0 + 1e-12) + 1e-300
        trace.j_values.append(Jc if accept else J_cur)
        trace.residual_norms.append(float(np.sqrt(resc2 if accept else res2)))
        trace.step_norms.append(step)
        trace.clipped.append(not pre.inside and pre.reason == "positivity")
        trace.scaled.append(not pre.inside and pre.reason == "norm")
        trace.rhos.append(rho)
        trace.accepted.append(accept)
        trace.wall_times.append(time.perf_counter() - t0)
        if accept:
            W, J_cur, res2, grad = cand, Jc, resc2, gradc
            any_accept = True
            halvings = 0
            # drift back toward the nominal step size so isolated rejections
            # (feasibility-lift noise) cannot ratchet rho to zero
            rho = min(cfg.rho, rho * 2.0 ** 0.25)
            if step <= cfg.stop_tol:
                trace.converged = True
                trace.reason = "step below stop_tol"
                break
        else:
            # a rejected candidate is deterministic: halve at once and retry.
            # At a constrained stationary point candidates keep getting
            # rejected while their step shrinks with rho; that resolves into
            # stall convergence.  Persistent ascent with a large step is the
            # divergence signal.
            if step <= cfg.stop_tol:
                trace.converged = True
                trace.reason = "stalled within stop_tol"
                break
            # keep a floor under rho once descent has been seen: scattered
            # rejections from the inexact feasibility lift must not freeze
            # the iteration
            rho = max(0.5 * rho, cfg.rho / 256.0) if any_accept else 0.5 * rho
            halvings += 1
            if halvings > 45:
                trace.reason = ("stalled: candidates ascend at every step size"
                                if any_accept else
                                "no descent found at any step size")
                if any_accept:
                    trace.converged = True
                    break
                raise DivergenceError(trace.reason, trace)
    else:
        trace.reason = "max_iter reached"
    return W, trace


def fit_convergence_rate(errors, floor: float = 0.0):
    """Least-squares slope of log(error) vs iteration above a noise floor.
    Returns (slope, r_squared, n_used)."""
    e = np.asarray(errors, dtype=float)
    keep = e > max(floor, 0.0)
    if keep.sum() < 3:
        return 0.0, 0.0, int(keep.sum())
    n = np.arange(len(e))[keep]
    y = np.log(e[keep])
    A = np.vstack([n, np.ones_like(n)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    yhat = A @ coef
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2, int(keep.sum())


# ---------------------------------------------------------------------------
# convexity probe


def probe_convexity(ctx: OperatorContext, params: ConvexSetParams, lam: float,
                    gamma: float, n_pairs: int = 100, seed: int = 0,
                    search: bool = True, lam_start: float = 0.25,
                    lam_cap: float = 64.0) -> dict:
    """Sampled check of the strict-convexity inequality

        J(W2) - J(W1) - [grad J(W1), W2 - W1] >= (1/8)||W2-W1||_L2h^2 + gamma ||W2-W1||_H1h^2

    over random feasible pairs, plus a doubling search for the smallest
    weight exponent at which every sampled pair passes.
    """
    grid = ctx.grid
    riesz = _RieszSolver(grid)
    pairs = []
    for i in range(n_pairs):
        Wa = random_feasible_point(ctx, params, seed=seed * 100003 + 2 * i)
        Wb = random_feasible_point(ctx, params, seed=seed * 100003 + 2 * i + 1)
        pairs.append((Wa, Wb))

    def all_pass(lam_try):
        cfg = SolverConfig(lam=lam_try, gamma=gamma, R=params.R,
                           eps_pos=params.eps_pos, set_mode=params.mode)
        npass = 0
        worst = np.inf
        for Wa, Wb in pairs:
            Ja, _, _, ga = _value_and_grad(Wa, ctx, cfg, riesz)
            Jb = _value_parts(Wb, ctx, cfg)[0]
            d = Wb - Wa
            D = Jb - Ja - h1_inner(ga, d, grid)
            bound = 0.125 * l2_inner(d, d, grid) + gamma * h1_inner(d, d, grid)
            margin = D - bound
            worst = min(worst, margin)
            if margin >= -1e-12 * max(1.0, abs(D)):
                npass += 1
        return npass, worst

    npass, worst = all_pass(lam)
    report = {"lam": lam, "gamma": gamma, "n_pairs": n_pairs,
              "fraction_pass": npass / n_pairs, "worst_margin": worst}
    if search:
        lam_try = lam_start
        found = None
        while lam_try <= lam_cap:
            np_, _ = all_pass(lam_try)
            if np_ == n_pairs:
                found = lam_try
                break
            lam_try *= 2.0
        report["lam_all_pass"] = found
    return report


# ---------------------------------------------------------------------------
# reconstruction


@dataclass
class ReconstructionResult:
    m_rec: ScalarField3D
    m_per_alpha: np.ndarray        # (B+1, B+1, Mz, Q)
    alpha_spread: float            # max over nodes/alpha of |m_per_alpha - m_rec|
    negative_nodes: int            # m_rec < 0 is reported, never clipped
    rel_l2_error: float | None = None
    max_error: float | None = None


def reconstruct_m(W: np.ndarray | CoeffField, ctx: OperatorContext,
                  m_true: ScalarField3D | None = None) -> ReconstructionResult:
    """Squared refractive index from a coefficient solution.

    u = u0 + w + g gives the squared depth derivative; the lateral
    derivatives come from the same bracket terms as the operator; the three
    squares are summed per source parameter and averaged by the quadrature.
    """
    Wv = W.values if isinstance(W, CoeffField) else np.asarray(W, dtype=float)
    st = _forward_state(Wv, ctx)
    grid = ctx.grid
    m_q = st.b[0] ** 2 + st.b[1] ** 2 + st.u
    m_vals = _einsum("ijkq,q->ijk", m_q, ctx.basis.quad.weights)
    spread = float(np.max(np.abs(m_q - m_vals[..., None])))
    m_rec = ScalarField3D(m_vals, grid.xs, grid.ys, grid.z_nodes)
    neg = int(np.sum(m_vals < 0.0))
    rel = mx = None
    if m_true is not None:
        rel, mx = compute_m_errors(m_rec, m_true, grid)
    return ReconstructionResult(m_rec=m_rec, m_per_alpha=m_q, alpha_spread=spread,
                                negative_nodes=neg, rel_l2_error=rel, max_error=mx)


def compute_m_errors(m_rec: ScalarField3D, m_true: ScalarField3D, grid: Grid):
    """(relative interior L2h error, max abs error) of a reconstruction."""
    d = (m_rec.values - m_true.values)[None]
    t = m_true.values[None]
    rel = np.sqrt(l2_inner(d, d, grid) / l2_inner(t, t, grid))
    return float(rel), float(np.max(np.abs(d)))


# ---------------------------------------------------------------------------
# stability experiment


def invert_bundle(bundle: DataBundle, basis: BasisSet, cfg: SolverConfig,
                  W0: np.ndarray | None = None):
    """Bundle-to-reconstruction convenience wrapper. Returns
    (W_min, trace, result, ctx)."""
    from .operator import make_context

    ctx = make_context(bundle, basis)
    params = cfg.set_params()
    if W0 is None:
        if cfg.start == "zero":
            W0 = project_to_set(np.zeros_like(bundle.G), ctx, params)
        elif cfg.start.startswith("random:"):
            W0 = random_feasible_point(ctx, params, seed=int(cfg.start.split(":")[1]))
        else:
            raise ValueError(f"unknown start '{cfg.start}'")
    W_min, trace = gradient_projection(W0, ctx, cfg)
    result = reconstruct_m(W_min, ctx)
    return W_min, trace, result, ctx


def bundle_distance(b1: DataBundle, b2: DataBundle) -> float:
    """Max-norm distance of the full data tuples (G, G_x, G_y, F, F_x, F_y)."""
    return max(max_norm(getattr(b1, k) - getattr(b2, k))
               for k in ("G", "GX", "GY", "F", "FX", "FY"))


def stability_experiment(bundle1: DataBundle, bundle2: DataBundle, basis: BasisSet,
                         cfg: SolverConfig) -> dict:
    """Empirical Lipschitz quotient: run the same inversion on two bundles and
    compare the reconstruction distance with the data distance."""
    _, _, res1, _ = invert_bundle(bundle1, basis, cfg)
    _, _, res2, _ = invert_bundle(bundle2, basis, cfg)
    num = max_norm(res1.m_rec.values - res2.m_rec.values)
    den = bundle_distance(bundle1, bundle2)
    return {"m_distance": num, "data_distance": den,
            "ratio": num / den if den > 0 else 0.0,
            "rec1": res1, "rec2": res2}
