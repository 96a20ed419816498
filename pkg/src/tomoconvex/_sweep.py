"""Gauss-Seidel fast-sweeping kernel for the factored eikonal equation.

The travel time is written as tau = T0 * tau1 with T0 the analytic free-space
travel time from the (off-grid) source, so the point-source singularity never
meets the difference stencil.  Each nodal update solves the upwind-discretized
quadratic

    sum_d (A_d t - B_d)^2 = m,   A_d = sgn |d_d T0| + T0/h_d,  B_d = T0 tau1_nb / h_d,

over axis subsets ordered by the neighbors' unfactored values (the standard
sorted-subset Godunov update).  Sweeps must stay sequential: convergence
relies on Gauss-Seidel propagation along the 8 diagonal orderings.
"""

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        def deco(f):
            return f
        return deco if not (args and callable(args[0])) else args[0]

BIG = 1e10


@njit(cache=True, nogil=True)
def _node_update(tau1, T0, p0x, p0y, p0z, m, xs, ys, zs, i, j, k):
    nx, ny, nz = tau1.shape
    T0p = T0[i, j, k]
    mp = m[i, j, k]

    a = np.empty(3)
    b = np.empty(3)
    u = np.empty(3)
    for d in range(3):
        if d == 0:
            lo, hi, pos, pmag = i > 0, i < nx - 1, xs[i], abs(p0x[i, j, k])
        elif d == 1:
            lo, hi, pos, pmag = j > 0, j < ny - 1, ys[j], abs(p0y[i, j, k])
        else:
            lo, hi, pos, pmag = k > 0, k < nz - 1, zs[k], abs(p0z[i, j, k])
        unb = BIG
        tnb = 0.0
        T0nb = 0.0
        step = 1.0
        if lo:
            if d == 0:
                t_, T_ = tau1[i - 1, j, k], T0[i - 1, j, k]
                st = pos - xs[i - 1]
            elif d == 1:
                t_, T_ = tau1[i, j - 1, k], T0[i, j - 1, k]
                st = pos - ys[j - 1]
            else:
                t_, T_ = tau1[i, j, k - 1], T0[i, j, k - 1]
                st = pos - zs[k - 1]
            if t_ * T_ < unb:
                unb, tnb, T0nb, step = t_ * T_, t_, T_, st
        if hi:
            if d == 0:
                t_, T_ = tau1[i + 1, j, k], T0[i + 1, j, k]
                st = xs[i + 1] - pos
            elif d == 1:
                t_, T_ = tau1[i, j + 1, k], T0[i, j + 1, k]
                st = ys[j + 1] - pos
            else:
                t_, T_ = tau1[i, j, k + 1], T0[i, j, k + 1]
                st = zs[k + 1] - pos
            if t_ * T_ < unb:
                unb, tnb, T0nb, step = t_ * T_, t_, T_, st
        if unb >= 0.5 * BIG:
            a[d], b[d], u[d] = 0.0, 0.0, BIG
            continue
        sgn = 1.0 if T0p >= T0nb else -1.0
        ad = sgn * pmag + T0p / step
        if ad <= 1e-300:  # broken upwind structure; treat the axis as inactive
            a[d], b[d], u[d] = 0.0, 0.0, BIG
            continue
        a[d], b[d], u[d] = ad, T0p * tnb / step, unb

    # insertion sort of the three axes by neighbor value
    for p in range(1, 3):
        ap, bp, up = a[p], b[p], u[p]
        q = p - 1
        while q >= 0 and u[q] > up:
            a[q + 1], b[q + 1], u[q + 1] = a[q], b[q], u[q]
            q -= 1
        a[q + 1], b[q + 1], u[q + 1] = ap, bp, up

    if u[0] >= 0.5 * BIG:
        return 0.0

    sa = 0.0
    sab = 0.0
    sbb = 0.0
    t = BIG
    for kk in range(3):
        if u[kk] >= 0.5 * BIG:
            break
        sa += a[kk] * a[kk]
        sab += a[kk] * b[kk]
        sbb += b[kk] * b[kk]
        disc = sab * sab - sa * (sbb - mp)
        if disc < 0.0:
            break
        tc = (sab + np.sqrt(disc)) / sa
        t = tc
        if kk == 2 or u[kk + 1] >= 0.5 * BIG or T0p * tc <= u[kk + 1]:
            break

    old = tau1[i, j, k]
    if t < old:
        tau1[i, j, k] = t
        change = (old - t) * T0p
        return change if change < BIG else BIG
    return 0.0


@njit(cache=True, nogil=True)
def sweep_pass(tau1, T0, p0x, p0y, p0z, m, xs, ys, zs, kmin):
    """One full pass: 8 diagonal sweep orderings over the non-frozen nodes.
    Returns the maximum unfactored travel-time change."""
    nx, ny, nz = tau1.shape
    worst = 0.0
    for order in range(8):
        ix0, ix1, sx = (0, nx, 1) if order & 1 == 0 else (nx - 1, -1, -1)
        iy0, iy1, sy = (0, ny, 1) if order & 2 == 0 else (ny - 1, -1, -1)
        iz0, iz1, sz = (kmin, nz, 1) if order & 4 == 0 else (nz - 1, kmin - 1, -1)
        for i in range(ix0, ix1, sx):
            for j in range(iy0, iy1, sy):
                for k in range(iz0, iz1, sz):
                    ch = _node_update(tau1, T0, p0x, p0y, p0z, m, xs, ys, zs, i, j, k)
                    if ch > worst:
                        worst = ch
    return worst
